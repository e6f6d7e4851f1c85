//! Point→voxel scatter (mean / max segment reduction) and voxel→point
//! gather, both as plain value kernels and as differentiable tape ops.
//!
//! Reductions walk each voxel's points in the canonical order fixed by the
//! [`VoxelMap`], so results never depend on input point order.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::voxel::VoxelMap;

const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScatterReduce {
    Mean,
    Max,
}

impl FromStr for ScatterReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Argument(format!(
                "unknown scatter reduction {other:?} (expected mean or max)"
            ))),
        }
    }
}

impl fmt::Display for ScatterReduce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

fn check_points(op: &str, feats: &Tensor, vm: &VoxelMap) -> Result<()> {
    if feats.rows() != vm.n_points() {
        return Err(Error::Contract(format!(
            "{op}: {} feature rows for a voxel map over {} points",
            feats.rows(),
            vm.n_points()
        )));
    }
    Ok(())
}

fn for_each_row<F>(out: &mut Tensor, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let cols = out.cols();
    if cols == 0 {
        return;
    }
    if out.len() < PAR_THRESHOLD {
        for (i, row) in out.data_mut().chunks_mut(cols).enumerate() {
            f(i, row);
        }
    } else {
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Segment mean of point rows per voxel.
pub fn scatter_mean_values(feats: &Tensor, vm: &VoxelMap) -> Result<Tensor> {
    check_points("scatter", feats, vm)?;
    let mut out = Tensor::zeros(vm.n_voxels(), feats.cols());
    for_each_row(&mut out, |v, row| {
        let group = vm.group(v);
        for &p in group {
            for (o, x) in row.iter_mut().zip(feats.row(p as usize)) {
                *o += x;
            }
        }
        let n = group.len() as f64;
        for o in row.iter_mut() {
            *o /= n;
        }
    });
    Ok(out)
}

/// Segment max per voxel and channel, plus the winning point index per
/// output element. Ties go to the lowest point index.
pub fn scatter_max_values(feats: &Tensor, vm: &VoxelMap) -> Result<(Tensor, Vec<u32>)> {
    check_points("scatter", feats, vm)?;
    let c = feats.cols();
    let mut out = Tensor::zeros(vm.n_voxels(), c);
    let mut argmax = vec![0u32; vm.n_voxels() * c];
    for v in 0..vm.n_voxels() {
        let group = vm.group(v);
        let row = out.row_mut(v);
        let arg = &mut argmax[v * c..(v + 1) * c];
        row.copy_from_slice(feats.row(group[0] as usize));
        arg.fill(group[0]);
        for &p in &group[1..] {
            for (ch, &x) in feats.row(p as usize).iter().enumerate() {
                if x > row[ch] || (x == row[ch] && p < arg[ch]) {
                    row[ch] = x;
                    arg[ch] = p;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Copies each voxel row to its points; masked points get zeros.
pub fn gather_values(vfeats: &Tensor, vm: &VoxelMap) -> Result<Tensor> {
    if vfeats.rows() != vm.n_voxels() {
        return Err(Error::Contract(format!(
            "gather: {} voxel rows for a map with {} voxels",
            vfeats.rows(),
            vm.n_voxels()
        )));
    }
    let mut out = Tensor::zeros(vm.n_points(), vfeats.cols());
    for_each_row(&mut out, |i, row| {
        if let Some(v) = vm.voxel_of(i) {
            row.copy_from_slice(vfeats.row(v));
        }
    });
    Ok(out)
}

/// Sums point rows into their voxel rows.
pub fn scatter_sum_values(feats: &Tensor, vm: &VoxelMap) -> Tensor {
    let mut out = Tensor::zeros(vm.n_voxels(), feats.cols());
    for_each_row(&mut out, |v, row| {
        for &p in vm.group(v) {
            for (o, x) in row.iter_mut().zip(feats.row(p as usize)) {
                *o += x;
            }
        }
    });
    out
}

impl Tape {
    /// Φ_{P→V}: reduce point features into one row per occupied voxel.
    pub fn scatter(
        &mut self,
        feats: &Var,
        vm: &Arc<VoxelMap>,
        reduce: ScatterReduce,
    ) -> Result<Var> {
        match reduce {
            ScatterReduce::Mean => {
                let out = scatter_mean_values(feats.value(), vm)?;
                self.record(
                    "scatter_mean",
                    out,
                    &[feats],
                    ScatterMeanBackward { map: vm.clone() },
                )
            }
            ScatterReduce::Max => {
                let (out, argmax) = scatter_max_values(feats.value(), vm)?;
                self.record("scatter_max", out, &[feats], ScatterMaxBackward { argmax })
            }
        }
    }

    /// Φ_{V→P}: copy each voxel's row to every point inside it.
    pub fn gather(&mut self, vfeats: &Var, vm: &Arc<VoxelMap>) -> Result<Var> {
        let out = gather_values(vfeats.value(), vm)?;
        self.record("gather", out, &[vfeats], GatherBackward { map: vm.clone() })
    }
}

struct ScatterMeanBackward {
    map: Arc<VoxelMap>,
}

impl Backward for ScatterMeanBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let vm = &self.map;
        let cols = ctx.grad.cols();
        let mut dx = Tensor::zeros(vm.n_points(), cols);
        for_each_row(&mut dx, |i, row| {
            if let Some(v) = vm.voxel_of(i) {
                let n = vm.group_size(v) as f64;
                for (d, g) in row.iter_mut().zip(ctx.grad.row(v)) {
                    *d = g / n;
                }
            }
        });
        vec![Some(dx)]
    }
}

struct ScatterMaxBackward {
    argmax: Vec<u32>,
}

impl Backward for ScatterMaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let c = x.cols();
        let mut dx = Tensor::zeros(x.rows(), c);
        for (k, (&p, &g)) in self.argmax.iter().zip(ctx.grad.data()).enumerate() {
            let ch = k % c;
            let cur = dx.get(p as usize, ch);
            dx.set(p as usize, ch, cur + g);
        }
        vec![Some(dx)]
    }
}

struct GatherBackward {
    map: Arc<VoxelMap>,
}

impl Backward for GatherBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(scatter_sum_values(ctx.grad, &self.map))]
    }
}
