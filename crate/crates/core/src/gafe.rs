//! Geometry-aware point features.
//!
//! For each scale the raw descriptor of a point is its offset from the
//! centroid of its voxel, the full point row, and its offset from the voxel
//! corner. A per-scale MLP lifts the descriptor, the lifted features are
//! concatenated with their voxel mean, projected to a shared width and
//! summed over scales.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scatter::{gather_values, scatter_mean_values, ScatterReduce};
use crate::tensor::Tensor;
use crate::voxel::{voxel_center_offset, PointCloud, VoxelMap, VoxelPyramid};

#[derive(Debug, Clone, PartialEq)]
pub struct GafeConfig {
    pub scales: Vec<f64>,
    pub mlp_width: usize,
    pub out_channels: usize,
    pub reduce: ScatterReduce,
}

impl GafeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("GAFE needs at least one scale".into()));
        }
        check_scales("GAFE", &self.scales)?;
        if self.mlp_width == 0 || self.out_channels == 0 {
            return Err(Error::Config("GAFE widths must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_scales(what: &str, scales: &[f64]) -> Result<()> {
    if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!(
            "{what} scales must be positive: {scales:?}"
        )));
    }
    if scales.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!(
            "{what} scales must be ascending: {scales:?}"
        )));
    }
    Ok(())
}

/// Width of the raw descriptor for a cloud with `feat_dim` attributes.
pub fn raw_feature_width(feat_dim: usize) -> usize {
    3 + (3 + feat_dim) + 3
}

/// `[c − centroid(voxel) | c | attributes | c − s·v]` per point; zero rows
/// for masked points.
pub fn raw_geometry_feature(pc: &PointCloud, vm: &VoxelMap) -> Result<Tensor> {
    let coords = Tensor::from_vec(
        pc.len(),
        3,
        pc.coords().iter().flat_map(|c| c.iter().copied()).collect(),
    )?;
    let centroids = gather_values(&scatter_mean_values(&coords, vm)?, vm)?;
    let corner = voxel_center_offset(pc, vm)?;
    let d = pc.feat_dim();
    let mut out = Tensor::zeros(pc.len(), raw_feature_width(d));
    for i in 0..pc.len() {
        if !pc.is_valid(i) {
            continue;
        }
        let c = pc.coords()[i];
        let row = out.row_mut(i);
        for a in 0..3 {
            row[a] = c[a] - centroids.get(i, a);
            row[3 + a] = c[a];
            row[6 + d + a] = corner.get(i, a);
        }
        row[6..6 + d].copy_from_slice(pc.feats().row(i));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GafeScale {
    pub mlp: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GafeParams {
    pub scales: Vec<GafeScale>,
}

impl GafeParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &GafeConfig,
        feat_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let raw = raw_feature_width(feat_dim);
        let scales = (0..cfg.scales.len())
            .map(|k| {
                Ok(GafeScale {
                    mlp: Linear::new(
                        store,
                        &format!("gafe.s{k}.mlp"),
                        raw,
                        cfg.mlp_width,
                        true,
                        rng,
                    )?,
                    proj: Linear::new(
                        store,
                        &format!("gafe.s{k}.proj"),
                        2 * cfg.mlp_width,
                        cfg.out_channels,
                        true,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }
}

/// Multi-scale hybrid feature `G`, `N x out_channels`.
pub fn gafe_forward(
    tape: &mut Tape,
    pc: &PointCloud,
    maps: &VoxelPyramid,
    cfg: &GafeConfig,
    params: &GafeParams,
    store: &ParamStore,
) -> Result<Var> {
    if params.scales.len() != cfg.scales.len() {
        return Err(Error::Config(format!(
            "{} GAFE scales configured, {} parameter sets",
            cfg.scales.len(),
            params.scales.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&s, p) in cfg.scales.iter().zip(&params.scales) {
        let vm: &Arc<VoxelMap> = maps.get(s)?;
        let raw = tape.leaf(raw_geometry_feature(pc, vm)?);
        let h = p.mlp.forward_relu(tape, store, &raw)?;
        let pooled = tape.scatter(&h, vm, cfg.reduce)?;
        let back = tape.gather(&pooled, vm)?;
        let hybrid = tape.concat_cols(&[&h, &back])?;
        let y = p.proj.forward(tape, store, &hybrid)?;
        if y.cols() != cfg.out_channels {
            return Err(Error::Config(format!(
                "GAFE scale {s} yields {} channels, expected {}",
                y.cols(),
                cfg.out_channels
            )));
        }
        total = Some(match total {
            None => y,
            Some(acc) => tape.add(&acc, &y)?,
        });
    }
    Ok(total.expect("at least one scale"))
}
