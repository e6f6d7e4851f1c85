//! Global training-time augmentation of point clouds.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::voxel::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentConfig {
    /// Uniform yaw rotation about the z axis.
    pub rotate: bool,
    /// Independent mirror of x and y, each with probability 1/2.
    pub flip: bool,
    /// Uniform isotropic scaling in `[0.95, 1.05]`.
    pub scale: bool,
    /// Gaussian coordinate noise, σ = 1 cm.
    pub jitter: bool,
}

impl AugmentConfig {
    pub fn outdoor() -> Self {
        Self {
            rotate: true,
            flip: true,
            ..Self::default()
        }
    }

    pub fn indoor() -> Self {
        Self {
            rotate: true,
            flip: true,
            scale: true,
            jitter: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);
pub const JITTER_SIGMA: f64 = 0.01;

/// Yaw-rotates, mirrors and scales about the origin, then jitters. Point
/// count, attributes, labels and the validity mask are untouched.
pub fn augment<R: Rng>(pc: &PointCloud, cfg: &AugmentConfig, rng: &mut R) -> PointCloud {
    let theta = if cfg.rotate {
        rng.random_range(0.0..TAU)
    } else {
        0.0
    };
    let flip_x = cfg.flip && rng.random_bool(0.5);
    let flip_y = cfg.flip && rng.random_bool(0.5);
    let scale = if cfg.scale {
        rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1)
    } else {
        1.0
    };
    let (sin, cos) = theta.sin_cos();
    let mut out = pc.clone();
    let noise = Normal::new(0.0, JITTER_SIGMA).expect("valid sigma");
    for c in out.coords_mut() {
        let (x, y) = (c[0], c[1]);
        let mut p = if cfg.rotate {
            [cos * x - sin * y, sin * x + cos * y, c[2]]
        } else {
            *c
        };
        if flip_x {
            p[0] = -p[0];
        }
        if flip_y {
            p[1] = -p[1];
        }
        if cfg.scale {
            p.iter_mut().for_each(|v| *v *= scale);
        }
        if cfg.jitter {
            p.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        *c = p;
    }
    out
}
