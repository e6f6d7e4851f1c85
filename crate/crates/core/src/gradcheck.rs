//! Central finite-difference checks of every differentiable op.
//!
//! Each case builds a small random instance whose differentiable inputs are
//! parameters in a [`ParamStore`]. The scalar probed is `Σ out ⊙ R` for a
//! fixed random `R`, so every output element contributes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gafe::{gafe_forward, raw_feature_width, GafeConfig, GafeParams};
use crate::loss::{cross_entropy, lovasz_softmax};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scatter::ScatterReduce;
use crate::spvfe::{multiscale_pooling, voxel_conv};
use crate::svpfe::{attentive_gather, Bottleneck, Rulebook, SparseVoxelTensor};
use crate::tensor::Tensor;
use crate::voxel::{voxelize, PointCloud, VoxelCoord, VoxelMap, VoxelPyramid};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this in both estimates are not compared.
pub const FLOOR: f64 = 1e-8;

pub const OPS: &[&str] = &[
    "linear",
    "relu",
    "softmax",
    "mul",
    "concat_slice",
    "select_rows",
    "reduce_max",
    "scatter_mean",
    "scatter_max",
    "gather",
    "attentive_gather",
    "voxel_conv",
    "multiscale_pooling",
    "sparse_conv3d",
    "bottleneck",
    "gafe",
    "cross_entropy",
    "lovasz_softmax",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Forward = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape by construction")
}

/// Entries kept at least 0.05 away from zero so ReLU kinks are not probed.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    random(rows, cols, rng).map(|v| {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

fn cloud(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let coords = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..extent)))
        .collect();
    PointCloud::from_coords(coords).expect("finite coordinates")
}

fn probe(f: &Forward, store: &ParamStore, r: &Tensor) -> Result<f64> {
    let mut tape = Tape::inference();
    let out = f(&mut tape, store)?;
    Ok(out
        .value()
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Worst relative error between tape gradients and central differences
/// over every scalar in `store`.
pub fn check(
    op: &'static str,
    store: &mut ParamStore,
    f: Forward,
    seed: u64,
) -> Result<GradReport> {
    let (rows, cols) = {
        let mut tape = Tape::inference();
        f(&mut tape, store)?.shape()
    };
    let r = random(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let weights = tape.leaf(r.clone());
        let prod = tape.mul(&out, &weights)?;
        let loss = tape.sum(&prod)?;
        tape.backward(&loss, store)?;
    }
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let mut worst: f64 = 0.0;
    let mut n_checked = 0;
    for id in ids {
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + STEP;
            let up = probe(&f, store, &r)?;
            store.get_mut(id).value.data_mut()[k] = orig - STEP;
            let down = probe(&f, store, &r)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = store.get(id).grad.data()[k];
            let denom = an.abs().max(fd.abs());
            if denom > FLOOR {
                worst = worst.max((an - fd).abs() / denom);
            }
            n_checked += 1;
        }
    }
    Ok(GradReport {
        op,
        max_rel_err: worst,
        n_checked,
    })
}

fn param(store: &mut ParamStore, name: &str, t: Tensor) -> Result<ParamId> {
    store.add(name, t)
}

/// Runs the case for `op` with random data from `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradReport> {
    let op: &'static str = OPS.iter().copied().find(|&o| o == op).ok_or_else(|| {
        Error::Argument(format!(
            "unknown op {op:?}; expected one of {}",
            OPS.join(", ")
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f: Forward = match op {
        "linear" => {
            let x = param(&mut store, "x", random(6, 5, &mut rng))?;
            let w = param(&mut store, "w", random(5, 4, &mut rng))?;
            let b = param(&mut store, "b", random(1, 4, &mut rng))?;
            Box::new(move |t, s| {
                let (x, w, b) = (t.param(s, x), t.param(s, w), t.param(s, b));
                t.linear(&x, &w, Some(&b))
            })
        }
        "relu" => {
            let x = param(&mut store, "x", away_from_zero(10, 8, &mut rng))?;
            Box::new(move |t, s| {
                let x = t.param(s, x);
                t.relu(&x)
            })
        }
        "softmax" => {
            let x = param(&mut store, "x", random(8, 5, &mut rng).scaled(3.0))?;
            Box::new(move |t, s| {
                let x = t.param(s, x);
                t.softmax_rows(&x)
            })
        }
        "mul" => {
            let a = param(&mut store, "a", random(7, 4, &mut rng))?;
            let b = param(&mut store, "b", random(7, 4, &mut rng))?;
            Box::new(move |t, s| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                t.mul(&a, &b)
            })
        }
        "concat_slice" => {
            let a = param(&mut store, "a", random(5, 3, &mut rng))?;
            let b = param(&mut store, "b", random(5, 4, &mut rng))?;
            Box::new(move |t, s| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let ab = t.concat_cols(&[&a, &b])?;
                let mid = t.slice_cols(&ab, 1, 4)?;
                let scaled = t.scale(&mid, -1.5)?;
                t.add(&scaled, &mid)
            })
        }
        "select_rows" => {
            let x = param(&mut store, "x", random(6, 4, &mut rng))?;
            Box::new(move |t, s| {
                let x = t.param(s, x);
                t.select_rows(&x, &[4, 0, 4, 2, 5])
            })
        }
        "reduce_max" => {
            let x = param(&mut store, "x", random(9, 6, &mut rng))?;
            Box::new(move |t, s| {
                let x = t.param(s, x);
                t.reduce_max_rows(&x)
            })
        }
        "scatter_mean" | "scatter_max" | "gather" => {
            let pc = cloud(30, 2.0, &mut rng);
            let vm = Arc::new(voxelize(&pc, 0.7)?);
            if op == "gather" {
                let v = param(&mut store, "v", random(vm.n_voxels(), 4, &mut rng))?;
                Box::new(move |t, s| {
                    let v = t.param(s, v);
                    t.gather(&v, &vm)
                })
            } else {
                let reduce = if op == "scatter_mean" {
                    ScatterReduce::Mean
                } else {
                    ScatterReduce::Max
                };
                let x = param(&mut store, "x", random(30, 4, &mut rng))?;
                Box::new(move |t, s| {
                    let x = t.param(s, x);
                    t.scatter(&x, &vm, reduce)
                })
            }
        }
        "attentive_gather" => {
            let pc = cloud(25, 2.0, &mut rng);
            let vm = Arc::new(voxelize(&pc, 0.8)?);
            let v = param(&mut store, "v", random(vm.n_voxels(), 4, &mut rng))?;
            let g = param(&mut store, "g", random(25, 3, &mut rng))?;
            let w = param(&mut store, "w", random(3, 4, &mut rng))?;
            Box::new(move |t, s| {
                let sv =
                    SparseVoxelTensor::new(vm.voxel_coords().clone(), t.param(s, v), vm.scale())?;
                let (g, w) = (t.param(s, g), t.param(s, w));
                attentive_gather(t, &sv, &vm, &g, &w)
            })
        }
        "voxel_conv" => {
            let pc = cloud(30, 2.0, &mut rng);
            let vm = Arc::new(voxelize(&pc, 0.7)?);
            let x = param(&mut store, "x", random(30, 3, &mut rng))?;
            let w = param(&mut store, "w", random(3, 4, &mut rng))?;
            Box::new(move |t, s| {
                let (x, w) = (t.param(s, x), t.param(s, w));
                Ok(voxel_conv(t, &x, &vm, &w, ScatterReduce::Mean)?.feats)
            })
        }
        "multiscale_pooling" => {
            let pc = cloud(20, 2.0, &mut rng);
            let maps: Vec<Arc<VoxelMap>> = [0.5, 1.0]
                .iter()
                .map(|&s| voxelize(&pc, s).map(Arc::new))
                .collect::<Result<_>>()?;
            let x = param(&mut store, "x", random(20, 2, &mut rng))?;
            let mlps = (0..2)
                .map(|k| Linear::new(&mut store, &format!("mlp{k}"), 4, 2, true, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let refs: Vec<&Arc<VoxelMap>> = maps.iter().collect();
                multiscale_pooling(t, s, &x, &refs, &mlps, ScatterReduce::Max)
            })
        }
        "sparse_conv3d" | "bottleneck" => {
            let mut coords: Vec<VoxelCoord> = (0..40)
                .map(|_| {
                    VoxelCoord::new(
                        rng.random_range(0..4),
                        rng.random_range(0..4),
                        rng.random_range(0..3),
                    )
                })
                .collect();
            coords.sort();
            coords.dedup();
            let coords = Arc::new(coords);
            let rules = Arc::new(Rulebook::build(&coords, 3)?);
            let n = coords.len();
            if op == "sparse_conv3d" {
                let x = param(&mut store, "x", random(n, 2, &mut rng))?;
                let w = param(&mut store, "w", random(27 * 2, 2, &mut rng))?;
                Box::new(move |t, s| {
                    let xs = SparseVoxelTensor::new(coords.clone(), t.param(s, x), 1.0)?;
                    let w = t.param(s, w);
                    Ok(t.sparse_conv3d(&xs, &w, &rules)?.feats)
                })
            } else {
                let x = param(&mut store, "x", random(n, 3, &mut rng))?;
                let b = Bottleneck::new(&mut store, "bn", 3, 1, 2, &mut rng)?;
                Box::new(move |t, s| {
                    let xs = SparseVoxelTensor::new(coords.clone(), t.param(s, x), 1.0)?;
                    Ok(b.forward(t, s, &xs, &rules)?.feats)
                })
            }
        }
        "gafe" => {
            let pc = cloud(12, 2.0, &mut rng);
            let cfg = GafeConfig {
                scales: vec![0.6, 1.2],
                mlp_width: 2,
                out_channels: 2,
                reduce: ScatterReduce::Mean,
            };
            debug_assert_eq!(raw_feature_width(0), 9);
            let params = GafeParams::new(&mut store, &cfg, 0, &mut rng)?;
            let maps = VoxelPyramid::build(&pc, &cfg.scales)?;
            Box::new(move |t, s| gafe_forward(t, &pc, &maps, &cfg, &params, s))
        }
        "cross_entropy" | "lovasz_softmax" => {
            let x = param(&mut store, "x", random(12, 3, &mut rng).scaled(2.0))?;
            let labels: Vec<u32> = (0..12)
                .map(|i| if i == 5 { 255 } else { (i * 7 % 3) as u32 })
                .collect();
            let ce = op == "cross_entropy";
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let p = t.softmax_rows(&x)?;
                if ce {
                    cross_entropy(t, &p, &labels, 255)
                } else {
                    lovasz_softmax(t, &p, &labels, 255)
                }
            })
        }
        _ => unreachable!("op list and cases agree"),
    };
    check(op, &mut store, f, seed)
}

/// Every op in [`OPS`], or just `module`.
pub fn run(module: &str, seed: u64) -> Result<Vec<GradReport>> {
    if module == "all" {
        OPS.iter().map(|op| check_op(op, seed)).collect()
    } else {
        Ok(vec![check_op(module, seed)?])
    }
}
