//! Timing harness for the point/voxel transfer kernels, including a
//! reference trilinear gather used only for cost comparison.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::scatter::{gather_values, scatter_mean_values};
use crate::svpfe::{attentive_gather, SparseVoxelTensor};
use crate::tensor::Tensor;
use crate::voxel::{voxelize, PointCloud, VoxelCoord, VoxelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    Scatter,
    Gather,
    Attentive,
    Trilinear,
}

impl BenchOp {
    pub const ALL: [BenchOp; 4] = [
        Self::Scatter,
        Self::Gather,
        Self::Attentive,
        Self::Trilinear,
    ];
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scatter" => Ok(Self::Scatter),
            "gather" => Ok(Self::Gather),
            "attentive" => Ok(Self::Attentive),
            "trilinear" => Ok(Self::Trilinear),
            other => Err(Error::Argument(format!(
                "unknown bench op {other:?} (scatter, gather, attentive, trilinear)"
            ))),
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scatter => "scatter",
            Self::Gather => "gather",
            Self::Attentive => "attentive",
            Self::Trilinear => "trilinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub op: BenchOp,
    pub points: usize,
    pub voxels: usize,
    pub channels: usize,
    /// Best of the repeats.
    pub seconds: f64,
}

impl BenchRow {
    pub fn points_per_sec(&self) -> f64 {
        self.points as f64 / self.seconds.max(1e-12)
    }
}

pub fn table_header() -> String {
    format!(
        "{:<10} {:>10} {:>10} {:>8} {:>12} {:>14}",
        "op", "points", "voxels", "chan", "ms", "points/s"
    )
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:>10} {:>10} {:>8} {:>12.3} {:>14.0}",
            self.op.to_string(),
            self.points,
            self.voxels,
            self.channels,
            self.seconds * 1e3,
            self.points_per_sec()
        )
    }
}

/// Uniform points over a LiDAR-sized slab.
pub fn bench_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n)
        .map(|_| {
            [
                rng.random_range(-48.0..48.0),
                rng.random_range(-48.0..48.0),
                rng.random_range(-3.0..1.8),
            ]
        })
        .collect();
    PointCloud::from_coords(coords)
}

/// Interpolates voxel features at each point from the eight surrounding
/// voxel centres; inactive corners contribute zero.
pub fn trilinear_gather_values(
    vfeats: &Tensor,
    coords: &[VoxelCoord],
    scale: f64,
    points: &[[f64; 3]],
) -> Result<Tensor> {
    if vfeats.rows() != coords.len() {
        return Err(Error::Contract(format!(
            "{} voxel rows for {} coordinates",
            vfeats.rows(),
            coords.len()
        )));
    }
    let c = vfeats.cols();
    let mut out = Tensor::zeros(points.len(), c);
    for (i, p) in points.iter().enumerate() {
        let u: [f64; 3] = std::array::from_fn(|a| p[a] / scale - 0.5);
        let base: [f64; 3] = u.map(f64::floor);
        let frac: [f64; 3] = std::array::from_fn(|a| u[a] - base[a]);
        let row = out.row_mut(i);
        for corner in 0..8 {
            let bit = |a: usize| (corner >> a) & 1;
            let key = VoxelCoord::new(
                base[0] as i32 + bit(0),
                base[1] as i32 + bit(1),
                base[2] as i32 + bit(2),
            );
            let Ok(v) = coords.binary_search(&key) else {
                continue;
            };
            let w: f64 = (0..3)
                .map(|a| if bit(a) == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            for (o, x) in row.iter_mut().zip(vfeats.row(v)) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

fn time_best<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times one op on `points` random points voxelized at `scale`. The
/// scatter timing includes voxelization.
pub fn bench_op(
    op: BenchOp,
    points: usize,
    scale: f64,
    channels: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRow> {
    let pc = bench_cloud(points, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut random = |r: usize, c: usize| {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let feats = random(points, channels)?;
    let vm: Arc<VoxelMap> = Arc::new(voxelize(&pc, scale)?);
    let vfeats = random(vm.n_voxels(), channels)?;
    let seconds = match op {
        BenchOp::Scatter => time_best(repeats, || {
            let vm = voxelize(&pc, scale)?;
            scatter_mean_values(&feats, &vm)?;
            Ok(())
        })?,
        BenchOp::Gather => time_best(repeats, || gather_values(&vfeats, &vm).map(drop))?,
        BenchOp::Attentive => {
            let geometry = random(points, channels)?;
            let w = random(channels, channels)?;
            time_best(repeats, || {
                let mut tape = Tape::inference();
                let v = SparseVoxelTensor::new(
                    vm.voxel_coords().clone(),
                    tape.leaf(vfeats.clone()),
                    scale,
                )?;
                let g = tape.leaf(geometry.clone());
                let w = tape.leaf(w.clone());
                attentive_gather(&mut tape, &v, &vm, &g, &w).map(drop)
            })?
        }
        BenchOp::Trilinear => time_best(repeats, || {
            trilinear_gather_values(&vfeats, vm.voxel_coords(), scale, pc.coords()).map(drop)
        })?,
    };
    Ok(BenchRow {
        op,
        points,
        voxels: vm.n_voxels(),
        channels,
        seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trilinear_hits_centres_and_reproduces_linear_fields() {
        let mut coords = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    coords.push(VoxelCoord::new(x, y, z));
                }
            }
        }
        let s = 0.5;
        // f(p) = 2x − y + 3z, sampled at voxel centres.
        let f = |p: [f64; 3]| 2.0 * p[0] - p[1] + 3.0 * p[2];
        let centre = |c: &VoxelCoord| {
            [
                (c.ix as f64 + 0.5) * s,
                (c.iy as f64 + 0.5) * s,
                (c.iz as f64 + 0.5) * s,
            ]
        };
        let vfeats =
            Tensor::from_vec(27, 1, coords.iter().map(|c| f(centre(c))).collect()).unwrap();
        let at_centre =
            trilinear_gather_values(&vfeats, &coords, s, &[centre(&coords[13])]).unwrap();
        assert_eq!(at_centre.data(), &[vfeats.get(13, 0)]);
        let inside = [[0.4, 0.6, 0.9], [1.1, 0.3, 0.26]];
        let out = trilinear_gather_values(&vfeats, &coords, s, &inside).unwrap();
        for (k, p) in inside.iter().enumerate() {
            assert!((out.get(k, 0) - f(*p)).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_corners_contribute_nothing() {
        let coords = vec![VoxelCoord::new(0, 0, 0)];
        let vfeats = Tensor::from_rows(&[[8.0]]).unwrap();
        // Halfway to the next centre along x only.
        let out = trilinear_gather_values(&vfeats, &coords, 1.0, &[[1.0, 0.5, 0.5]]).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn every_op_reports() {
        for op in BenchOp::ALL {
            let row = bench_op(op, 2000, 0.8, 8, 1, 0).unwrap();
            assert_eq!(row.points, 2000);
            assert!(row.seconds > 0.0 && row.voxels > 0);
            assert!(row.to_string().starts_with(&op.to_string()));
        }
        assert!("bilinear".parse::<BenchOp>().is_err());
    }
}
