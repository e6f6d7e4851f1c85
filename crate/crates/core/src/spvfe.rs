//! Point→voxel stage: multi-scale pooling of point features followed by
//! VoxelConv into the sparse voxel map of the block's target scale.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scatter::ScatterReduce;
use crate::svpfe::SparseVoxelTensor;
use crate::voxel::VoxelMap;

/// For every map: `relu(W_s · [F | gather(scatter(F))])`; outputs are
/// concatenated in map order.
pub fn multiscale_pooling(
    tape: &mut Tape,
    store: &ParamStore,
    feats: &Var,
    maps: &[&Arc<VoxelMap>],
    mlps: &[Linear],
    reduce: ScatterReduce,
) -> Result<Var> {
    if maps.len() != mlps.len() || maps.is_empty() {
        return Err(Error::Config(format!(
            "{} pooling scales for {} MLPs",
            maps.len(),
            mlps.len()
        )));
    }
    if let Some(vm) = maps.iter().find(|vm| vm.n_points() != feats.rows()) {
        return Err(Error::Contract(format!(
            "pooling map at scale {} covers {} points, features have {} rows",
            vm.scale(),
            vm.n_points(),
            feats.rows()
        )));
    }
    let mut outs = Vec::with_capacity(maps.len());
    for (vm, mlp) in maps.iter().zip(mlps) {
        let pooled = tape.scatter(feats, vm, reduce)?;
        let back = tape.gather(&pooled, vm)?;
        let joined = tape.concat_cols(&[feats, &back])?;
        outs.push(mlp.forward_relu(tape, store, &joined)?);
    }
    let refs: Vec<&Var> = outs.iter().collect();
    tape.concat_cols(&refs)
}

/// `scatter(F · W)` at the map's scale: one row per occupied voxel.
pub fn voxel_conv(
    tape: &mut Tape,
    feats: &Var,
    vm: &Arc<VoxelMap>,
    weight: &Var,
    reduce: ScatterReduce,
) -> Result<SparseVoxelTensor> {
    let lifted = tape.linear(feats, weight, None)?;
    let voxels = tape.scatter(&lifted, vm, reduce)?;
    SparseVoxelTensor::new(vm.voxel_coords().clone(), voxels, vm.scale())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpvfeParams {
    pub pooling: Vec<Linear>,
    pub voxel_conv: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl SpvfeParams {
    /// `n_pool` per-scale MLPs of width `pool_width` each, then a VoxelConv
    /// from `n_pool · pool_width` to `voxel_width` channels.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        n_pool: usize,
        pool_width: usize,
        voxel_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pooling = (0..n_pool)
            .map(|k| {
                Linear::new(
                    store,
                    &format!("{name}.pool{k}"),
                    2 * in_width,
                    pool_width,
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let conv_in = n_pool * pool_width;
        let voxel_conv =
            store.add_uniform(format!("{name}.voxel_conv"), conv_in, voxel_width, rng)?;
        Ok(Self {
            pooling,
            voxel_conv,
            in_width,
            out_width: voxel_width,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: &Var,
        pool_maps: &[&Arc<VoxelMap>],
        target: &Arc<VoxelMap>,
        reduce: ScatterReduce,
    ) -> Result<SparseVoxelTensor> {
        let pooled = multiscale_pooling(tape, store, feats, pool_maps, &self.pooling, reduce)?;
        let w = tape.param(store, self.voxel_conv);
        voxel_conv(tape, &pooled, target, &w, reduce)
    }
}
