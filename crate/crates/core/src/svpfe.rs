//! Voxel→point stage: submanifold sparse 3-D convolution, residual
//! bottlenecks over sparse voxel maps, and attentive gathering back onto
//! points.
//!
//! Convolutions keep the active set fixed: output voxel `ζ` receives
//! `Σ_δ x[ζ + δ] · W_δ` over the stencil offsets `δ` whose neighbour is
//! active, and no new voxels are created.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::voxel::{VoxelCoord, VoxelMap};

const NO_NEIGHBOR: u32 = u32::MAX;
const PAR_THRESHOLD: usize = 1 << 14;

/// Active voxels in canonical order with one feature row each.
#[derive(Debug, Clone)]
pub struct SparseVoxelTensor {
    pub coords: Arc<Vec<VoxelCoord>>,
    pub feats: Var,
    pub scale: f64,
}

impl SparseVoxelTensor {
    pub fn new(coords: Arc<Vec<VoxelCoord>>, feats: Var, scale: f64) -> Result<Self> {
        if feats.rows() != coords.len() {
            return Err(Error::Contract(format!(
                "{} feature rows for {} voxels",
                feats.rows(),
                coords.len()
            )));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(
                "voxel coordinates must be unique and sorted".into(),
            ));
        }
        Ok(Self {
            coords,
            feats,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    fn with_feats(&self, feats: Var) -> Self {
        Self {
            coords: self.coords.clone(),
            feats,
            scale: self.scale,
        }
    }
}

/// Neighbour table for a `k³` stencil over a fixed active set.
///
/// Offsets are enumerated lexicographically over `(dx, dy, dz)` in
/// `-r..=r`, so the offset at index `d` negates to index `k³ - 1 - d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    kernel_size: usize,
    n_voxels: usize,
    /// `n_voxels x k³`, the active neighbour at each offset or `NO_NEIGHBOR`.
    neighbors: Vec<u32>,
}

impl Rulebook {
    pub fn build(coords: &[VoxelCoord], kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        let offsets = stencil(kernel_size);
        let vol = offsets.len();
        let mut neighbors = vec![NO_NEIGHBOR; coords.len() * vol];
        let fill = |(o, row): (usize, &mut [u32])| {
            let here = coords[o];
            for (slot, &(dx, dy, dz)) in row.iter_mut().zip(&offsets) {
                if let Ok(i) = coords.binary_search(&here.offset(dx, dy, dz)) {
                    *slot = i as u32;
                }
            }
        };
        if coords.len() * vol > PAR_THRESHOLD {
            neighbors.par_chunks_mut(vol).enumerate().for_each(fill);
        } else {
            neighbors.chunks_mut(vol).enumerate().for_each(fill);
        }
        Ok(Self {
            kernel_size,
            n_voxels: coords.len(),
            neighbors,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    /// Active neighbour of voxel `o` at stencil offset `d`.
    #[inline]
    pub fn neighbor(&self, o: usize, d: usize) -> Option<usize> {
        match self.neighbors[o * self.kernel_volume() + d] {
            NO_NEIGHBOR => None,
            i => Some(i as usize),
        }
    }

    /// Number of (input, output, offset) triples.
    pub fn num_pairs(&self) -> usize {
        self.neighbors.iter().filter(|&&n| n != NO_NEIGHBOR).count()
    }
}

/// Stencil offsets of a `k³` kernel in lexicographic order.
pub fn stencil(kernel_size: usize) -> Vec<(i32, i32, i32)> {
    let r = (kernel_size / 2) as i32;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push((dx, dy, dz));
            }
        }
    }
    out
}

/// `out[o] += Σ_d src[nbr(o, d)] · W_d` for one output row, where `nbr` is
/// supplied by `pick`.
#[inline]
fn conv_row(
    out_row: &mut [f64],
    src: &Tensor,
    weight: &Tensor,
    cin: usize,
    vol: usize,
    pick: impl Fn(usize) -> Option<usize>,
    transpose: bool,
) {
    for d in 0..vol {
        let Some(i) = pick(d) else { continue };
        let x = src.row(i);
        if transpose {
            // out_row (cin) += x (cout) · W_dᵀ
            for (k, o) in out_row.iter_mut().enumerate() {
                let w = weight.row(d * cin + k);
                let mut acc = 0.0;
                for (a, b) in x.iter().zip(w) {
                    acc += a * b;
                }
                *o += acc;
            }
        } else {
            for (k, &xv) in x.iter().enumerate() {
                let w = weight.row(d * cin + k);
                for (o, &wv) in out_row.iter_mut().zip(w) {
                    *o += xv * wv;
                }
            }
        }
    }
}

fn rows_par(out: &mut Tensor, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    let cols = out.cols();
    if cols == 0 {
        return;
    }
    if out.len() > PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, r)| f(i, r));
    } else {
        out.data_mut()
            .chunks_mut(cols)
            .enumerate()
            .for_each(|(i, r)| f(i, r));
    }
}

/// Value-level submanifold convolution; `weight` is `(k³·cin) x cout`.
pub fn sparse_conv3d_values(x: &Tensor, weight: &Tensor, rules: &Rulebook) -> Result<Tensor> {
    let vol = rules.kernel_volume();
    if x.rows() != rules.n_voxels() {
        return Err(Error::Contract(format!(
            "rulebook over {} voxels applied to {} rows",
            rules.n_voxels(),
            x.rows()
        )));
    }
    if weight.rows() != vol * x.cols() {
        return dim_err(
            "sparse_conv3d",
            format!(
                "weight has {} rows, expected {}·{}",
                weight.rows(),
                vol,
                x.cols()
            ),
        );
    }
    let cin = x.cols();
    let mut out = Tensor::zeros(x.rows(), weight.cols());
    rows_par(&mut out, |o, row| {
        conv_row(row, x, weight, cin, vol, |d| rules.neighbor(o, d), false)
    });
    Ok(out)
}

impl Tape {
    pub fn sparse_conv3d(
        &mut self,
        x: &SparseVoxelTensor,
        weight: &Var,
        rules: &Arc<Rulebook>,
    ) -> Result<SparseVoxelTensor> {
        let out = sparse_conv3d_values(x.feats.value(), weight.value(), rules)?;
        let feats = self.record(
            "sparse_conv3d",
            out,
            &[&x.feats, weight],
            SparseConvBackward {
                rules: rules.clone(),
            },
        )?;
        Ok(x.with_feats(feats))
    }
}

struct SparseConvBackward {
    rules: Arc<Rulebook>,
}

impl Backward for SparseConvBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let rules = &self.rules;
        let vol = rules.kernel_volume();
        let cin = x.cols();
        let cout = w.cols();
        let dy = ctx.grad;

        // dx[i] = Σ_d dy[nbr(i, -d)] · W_dᵀ
        let mut dx = Tensor::zeros(x.rows(), cin);
        rows_par(&mut dx, |i, row| {
            conv_row(
                row,
                dy,
                w,
                cin,
                vol,
                |d| rules.neighbor(i, vol - 1 - d),
                true,
            )
        });

        // dW_d = Σ_o x[nbr(o, d)]ᵀ · dy[o]
        let blocks: Vec<Vec<f64>> = (0..vol)
            .into_par_iter()
            .map(|d| {
                let mut blk = vec![0.0; cin * cout];
                for o in 0..rules.n_voxels() {
                    let Some(i) = rules.neighbor(o, d) else {
                        continue;
                    };
                    let g = dy.row(o);
                    for (k, &xv) in x.row(i).iter().enumerate() {
                        for (b, &gv) in blk[k * cout..(k + 1) * cout].iter_mut().zip(g) {
                            *b += xv * gv;
                        }
                    }
                }
                blk
            })
            .collect();
        let dw = Tensor::from_vec(vol * cin, cout, blocks.concat()).unwrap();
        vec![Some(dx), Some(dw)]
    }
}

/// Learned `k³` sparse kernel, weight `(k³·cin) x cout`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernel {
    pub kernel_size: usize,
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl SparseKernel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let vol = kernel_size.pow(3);
        let weight = store.add(
            format!("{name}.w"),
            crate::params::uniform_init(vol * cin, cout, vol * cin, rng),
        )?;
        Ok(Self {
            kernel_size,
            weight,
            cin,
            cout,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &SparseVoxelTensor,
        rules: &Arc<Rulebook>,
    ) -> Result<SparseVoxelTensor> {
        if rules.kernel_size() != self.kernel_size {
            return Err(Error::Contract(format!(
                "{}³ kernel given a {}³ rulebook",
                self.kernel_size,
                rules.kernel_size()
            )));
        }
        let w = tape.param(store, self.weight);
        tape.sparse_conv3d(x, &w, rules)
    }
}

/// 1³ reduce → 3³ sparse conv → 1³ expand with ReLUs between, a residual
/// connection (projected when widths differ) and a final ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub reduce: Linear,
    pub conv: SparseKernel,
    pub expand: Linear,
    pub projection: Option<Linear>,
}

impl Bottleneck {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Linear::new(store, &format!("{name}.reduce"), cin, mid, true, rng)?,
            conv: SparseKernel::new(store, &format!("{name}.conv"), 3, mid, mid, rng)?,
            expand: Linear::new(store, &format!("{name}.expand"), mid, cout, true, rng)?,
            projection: if cin != cout {
                Some(Linear::new(
                    store,
                    &format!("{name}.proj"),
                    cin,
                    cout,
                    false,
                    rng,
                )?)
            } else {
                None
            },
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &SparseVoxelTensor,
        rules: &Arc<Rulebook>,
    ) -> Result<SparseVoxelTensor> {
        let h = self.reduce.forward_relu(tape, store, &x.feats)?;
        let h = self.conv.forward(tape, store, &x.with_feats(h), rules)?;
        let h = tape.relu(&h.feats)?;
        let h = self.expand.forward(tape, store, &h)?;
        let residual = match &self.projection {
            Some(p) => p.forward(tape, store, &x.feats)?,
            None => x.feats.clone(),
        };
        let sum = tape.add(&h, &residual)?;
        let out = tape.relu(&sum)?;
        Ok(x.with_feats(out))
    }
}

/// `gather(v) ⊙ (G · W′)`: nearest-gathered voxel features modulated by
/// geometry-conditioned weights.
pub fn attentive_gather(
    tape: &mut Tape,
    v: &SparseVoxelTensor,
    vm: &Arc<VoxelMap>,
    geometry: &Var,
    attention: &Var,
) -> Result<Var> {
    if !Arc::ptr_eq(&v.coords, vm.voxel_coords()) && *v.coords != **vm.voxel_coords() {
        return Err(Error::Contract(
            "sparse tensor active set differs from the voxel map".into(),
        ));
    }
    let nearest = tape.gather(&v.feats, vm)?;
    let weights = tape.linear(geometry, attention, None)?;
    if weights.cols() != nearest.cols() {
        return Err(Error::Config(format!(
            "attention width {} differs from voxel width {}",
            weights.cols(),
            nearest.cols()
        )));
    }
    tape.mul(&nearest, &weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvpfeParams {
    pub bottlenecks: Vec<Bottleneck>,
    /// `W′`, present when attentive gathering is enabled.
    pub attention: Option<ParamId>,
}

impl SvpfeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        mid: usize,
        n_bottlenecks: usize,
        geometry_width: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let bottlenecks = (0..n_bottlenecks)
            .map(|k| {
                Bottleneck::new(
                    store,
                    &format!("{name}.bn{k}"),
                    channels,
                    mid,
                    channels,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let attention = geometry_width
            .map(|g| store.add_uniform(format!("{name}.attention"), g, channels, rng))
            .transpose()?;
        Ok(Self {
            bottlenecks,
            attention,
        })
    }

    /// Bottleneck stack followed by attentive (or nearest) gathering.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: SparseVoxelTensor,
        vm: &Arc<VoxelMap>,
        geometry: &Var,
    ) -> Result<Var> {
        let mut h = x;
        if !self.bottlenecks.is_empty() {
            let rules = Arc::new(Rulebook::build(&h.coords, 3)?);
            for b in &self.bottlenecks {
                h = b.forward(tape, store, &h, &rules)?;
            }
        }
        match self.attention {
            Some(att) => {
                let w = tape.param(store, att);
                attentive_gather(tape, &h, vm, geometry, &w)
            }
            None => tape.gather(&h.feats, vm),
        }
    }
}
