//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero
//! exit if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drinet_core::augment::AugmentConfig;
use drinet_core::bench::{bench_cloud, bench_op, BenchOp};
use drinet_core::checkpoint::Checkpoint;
use drinet_core::data::{generate_scene, shape_dataset, SceneSpec};
use drinet_core::gradcheck;
use drinet_core::loss::{cross_entropy, lovasz_softmax};
use drinet_core::metrics::confusion_and_miou;
use drinet_core::nn::Linear;
use drinet_core::scatter::{gather_values, scatter_max_values, scatter_mean_values};
use drinet_core::spvfe::multiscale_pooling;
use drinet_core::svpfe::{
    attentive_gather, sparse_conv3d_values, stencil, Bottleneck, Rulebook, SparseVoxelTensor,
};
use drinet_core::train::{DataConfig, TrainConfig, Trainer};
use drinet_core::{
    voxelize, DriNet, Head, ModelConfig, ParamStore, PointCloud, ScatterReduce, Tape, Tensor,
    VoxelCoord,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Distinct points sorted lexicographically, so that index order equals
/// the canonical within-voxel order.
fn sorted_cloud(n: usize, extent: f64, feat_dim: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let mut coords: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-extent..extent)))
        .collect();
    coords.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    let feats = random_tensor(n, feat_dim, rng);
    PointCloud::new(coords, feats, None).unwrap()
}

fn key(p: [f64; 3], s: f64) -> (i32, i32, i32) {
    (
        (p[0] / s).floor() as i32,
        (p[1] / s).floor() as i32,
        (p[2] / s).floor() as i32,
    )
}

/// Groups point indices by voxel key, in index order.
fn oracle_groups(pc: &PointCloud, s: f64) -> BTreeMap<(i32, i32, i32), Vec<usize>> {
    let mut groups: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, &p) in pc.coords().iter().enumerate() {
        groups.entry(key(p, s)).or_default().push(i);
    }
    groups
}

fn oracle_scatter_mean(
    feats: &Tensor,
    groups: &BTreeMap<(i32, i32, i32), Vec<usize>>,
) -> Vec<Vec<f64>> {
    groups
        .values()
        .map(|members| {
            let mut acc = vec![0.0; feats.cols()];
            for &i in members {
                for (a, x) in acc.iter_mut().zip(feats.row(i)) {
                    *a += x;
                }
            }
            acc.iter().map(|a| a / members.len() as f64).collect()
        })
        .collect()
}

fn small_model(head: Head, num_classes: usize) -> ModelConfig {
    let base = match head {
        Head::Segmentation => ModelConfig::outdoor(num_classes),
        Head::Classification => ModelConfig::shape_classification(num_classes),
    };
    ModelConfig {
        point_width: 8,
        gafe_mlp_width: 8,
        pool_width: 4,
        voxel_width: 12,
        bottleneck_mid: 4,
        n_bottlenecks: 1,
        head_hidden: 8,
        ..base
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut largest = 0;
    for seed in 0..3 {
        for r in gradcheck::run("all", seed).map_err(err)? {
            ensure(r.passed(), || {
                format!("{} seed {seed}: rel err {:.3e}", r.op, r.max_rel_err)
            })?;
            let w = worst.entry(r.op).or_insert(0.0);
            *w = w.max(r.max_rel_err);
            largest = largest.max(r.n_checked);
        }
    }
    let required = [
        "linear",
        "relu",
        "softmax",
        "scatter_mean",
        "scatter_max",
        "gather",
        "attentive_gather",
        "voxel_conv",
        "sparse_conv3d",
        "bottleneck",
        "cross_entropy",
        "lovasz_softmax",
    ];
    for op in required {
        ensure(worst.contains_key(op), || format!("{op} not covered"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    let (op, e) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    Ok(format!(
        "{} ops x 3 seeds, worst {e:.2e} ({op}), <= {largest} checked entries, {secs:.1} s",
        worst.len()
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Scatter/gather against per-voxel loops.
    for &s in &[0.3, 0.7, 1.9] {
        let pc = sorted_cloud(600, 3.0, 5, &mut rng);
        let vm = voxelize(&pc, s).map_err(err)?;
        let groups = oracle_groups(&pc, s);
        let mean = scatter_mean_values(pc.feats(), &vm).map_err(err)?;
        let want = oracle_scatter_mean(pc.feats(), &groups);
        for (v, row) in want.iter().enumerate() {
            ensure(mean.row(v) == row.as_slice(), || {
                format!("scatter_mean row {v} at s={s}")
            })?;
        }
        let (max, _) = scatter_max_values(pc.feats(), &vm).map_err(err)?;
        for (v, members) in groups.values().enumerate() {
            for c in 0..5 {
                let m = members
                    .iter()
                    .map(|&i| pc.feats().get(i, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                ensure(max.get(v, c) == m, || {
                    format!("scatter_max ({v},{c}) at s={s}")
                })?;
            }
        }
        let gathered = gather_values(&mean, &vm).map_err(err)?;
        for (v, members) in groups.values().enumerate() {
            for &i in members {
                ensure(gathered.row(i) == mean.row(v), || format!("gather row {i}"))?;
            }
        }
    }

    // Sparse convolution against a dense zero-padded 8³ convolution.
    let mut conv_err: f64 = 0.0;
    for trial in 0..3 {
        let (cin, cout) = (3, 4);
        let mut dense = vec![None; 512];
        let mut coords = Vec::new();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    if rng.random_bool(0.3) {
                        coords.push(VoxelCoord::new(x, y, z));
                    }
                }
            }
        }
        let feats = random_tensor(coords.len(), cin, &mut rng);
        for (k, c) in coords.iter().enumerate() {
            dense[(c.ix * 64 + c.iy * 8 + c.iz) as usize] = Some(k);
        }
        let weight = random_tensor(27 * cin, cout, &mut rng);
        let rules = Rulebook::build(&coords, 3).map_err(err)?;
        let got = sparse_conv3d_values(&feats, &weight, &rules).map_err(err)?;
        for (o, c) in coords.iter().enumerate() {
            for j in 0..cout {
                let mut acc = 0.0;
                for (d, (dx, dy, dz)) in stencil(3).into_iter().enumerate() {
                    let (x, y, z) = (c.ix + dx, c.iy + dy, c.iz + dz);
                    if !(0..8).contains(&x) || !(0..8).contains(&y) || !(0..8).contains(&z) {
                        continue;
                    }
                    if let Some(k) = dense[(x * 64 + y * 8 + z) as usize] {
                        for i in 0..cin {
                            acc += feats.get(k, i) * weight.get(d * cin + i, j);
                        }
                    }
                }
                conv_err = conv_err.max((got.get(o, j) - acc).abs());
            }
        }
        ensure(conv_err < 1e-10, || {
            format!("dense conv trial {trial}: abs err {conv_err:.3e}")
        })?;
    }

    // Multi-scale pooling against the straight-line algorithm.
    let pc = sorted_cloud(300, 2.0, 2, &mut rng);
    let scales = [0.4, 0.8, 1.6];
    let mut store = ParamStore::new();
    let mlps: Vec<Linear> = (0..scales.len())
        .map(|k| Linear::new(&mut store, &format!("p{k}"), 4, 3, true, &mut rng).unwrap())
        .collect();
    for m in &mlps {
        let b = m.bias.unwrap();
        store.get_mut(b).value = random_tensor(1, 3, &mut rng);
    }
    let maps: Vec<_> = scales
        .iter()
        .map(|&s| Arc::new(voxelize(&pc, s).unwrap()))
        .collect();
    let refs: Vec<_> = maps.iter().collect();
    let mut tape = Tape::inference();
    let f = tape.leaf(pc.feats().clone());
    let got = multiscale_pooling(&mut tape, &store, &f, &refs, &mlps, ScatterReduce::Mean)
        .map_err(err)?;
    for (k, &s) in scales.iter().enumerate() {
        let groups = oracle_groups(&pc, s);
        let means = oracle_scatter_mean(pc.feats(), &groups);
        let w = &store.get(mlps[k].weight).value;
        let b = &store.get(mlps[k].bias.unwrap()).value;
        for (v, members) in groups.values().enumerate() {
            for &i in members {
                let input: Vec<f64> = pc.feats().row(i).iter().chain(&means[v]).copied().collect();
                for j in 0..3 {
                    let mut acc = 0.0;
                    for (q, x) in input.iter().enumerate() {
                        acc += x * w.get(q, j);
                    }
                    let want = (acc + b.get(0, j)).max(0.0);
                    ensure(got.value().get(i, 3 * k + j) == want, || {
                        format!("pooling ({i},{k},{j})")
                    })?;
                }
            }
        }
    }

    // Voxel counts against distinct keys.
    let mut cases = 0;
    for n in [1, 10, 1000, 5000] {
        let pc = bench_cloud(n, n as u64).map_err(err)?;
        for &s in &[0.05, 0.4, 3.2, 50.0] {
            let distinct: BTreeSet<_> = pc.coords().iter().map(|&p| key(p, s)).collect();
            let vm = voxelize(&pc, s).map_err(err)?;
            ensure(vm.n_voxels() == distinct.len(), || {
                format!("n={n} s={s}: {} vs {}", vm.n_voxels(), distinct.len())
            })?;
            cases += 1;
        }
    }
    Ok(format!(
        "scatter/gather exact at 3 scales, dense conv max abs err {conv_err:.1e}, pooling exact, {cases} voxel counts exact"
    ))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = generate_scene(&SceneSpec {
        n_points: 600,
        seed: 3,
        ..Default::default()
    })
    .map_err(err)?;
    let mut store = ParamStore::new();
    let seg = DriNet::new(small_model(Head::Segmentation, 4), &mut store, &mut rng).map_err(err)?;
    let base = seg
        .forward_segmentation(&mut Tape::inference(), &store, &scene)
        .map_err(err)?;

    let (shape, _) = shape_dataset(1, 400, 3).map_err(err)?.remove(0);
    let mut cstore = ParamStore::new();
    let cls =
        DriNet::new(small_model(Head::Classification, 2), &mut cstore, &mut rng).map_err(err)?;
    let cbase = cls
        .forward_classification(&mut Tape::inference(), &cstore, &shape)
        .map_err(err)?;

    let vm = voxelize(&scene, 0.8).map_err(err)?;
    let vbase = scatter_mean_values(scene.feats(), &vm).map_err(err)?;

    let perms = 20;
    for t in 0..perms {
        let mut order: Vec<usize> = (0..scene.len()).collect();
        order.shuffle(&mut rng);
        let p = scene.permuted(&order);
        let out = seg
            .forward_segmentation(&mut Tape::inference(), &store, &p)
            .map_err(err)?;
        for (k, &i) in order.iter().enumerate() {
            ensure(
                out.logits.value().row(k) == base.logits.value().row(i),
                || format!("segmentation permutation {t}: row {k} differs"),
            )?;
        }
        let pvm = voxelize(&p, 0.8).map_err(err)?;
        let pv = scatter_mean_values(p.feats(), &pvm).map_err(err)?;
        ensure(pv == vbase, || {
            format!("scatter permutation {t} changed voxel features")
        })?;

        let mut order: Vec<usize> = (0..shape.len()).collect();
        order.shuffle(&mut rng);
        let ps = shape.permuted(&order);
        let c = cls
            .forward_classification(&mut Tape::inference(), &cstore, &ps)
            .map_err(err)?;
        ensure(c.value() == cbase.value(), || {
            format!("classification permutation {t} changed logits")
        })?;
    }
    Ok(format!("{perms} permutations each: segmentation equivariant, classification and scatter invariant, bitwise"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pc = bench_cloud(2000, 4).map_err(err)?;
    let vm = Arc::new(voxelize(&pc, 6.0).map_err(err)?);
    let v = random_tensor(vm.n_voxels(), 6, &mut rng);
    let once = gather_values(&v, &vm).map_err(err)?;
    let twice = gather_values(&scatter_mean_values(&once, &vm).map_err(err)?, &vm).map_err(err)?;
    let round_trip = twice.max_abs_diff(&once);
    ensure(round_trip <= 4.0 * f64::EPSILON, || {
        format!("gather∘scatter∘gather off by {round_trip:.2e}")
    })?;

    let mut tape = Tape::inference();
    let sv = SparseVoxelTensor::new(vm.voxel_coords().clone(), tape.leaf(v.clone()), 6.0)
        .map_err(err)?;
    let geometry = tape.leaf(Tensor::filled(pc.len(), 1, 1.0));
    let unit = tape.leaf(Tensor::filled(1, 6, 1.0));
    let attended = attentive_gather(&mut tape, &sv, &vm, &geometry, &unit).map_err(err)?;
    ensure(*attended.value() == once, || {
        "unit attention differs from nearest gather".into()
    })?;

    let vm = Arc::new(voxelize(&pc, 1.0).map_err(err)?);
    let rules = Arc::new(Rulebook::build(vm.voxel_coords(), 3).map_err(err)?);
    let mut store = ParamStore::new();
    let blocks: Vec<Bottleneck> = (0..4)
        .map(|k| Bottleneck::new(&mut store, &format!("b{k}"), 6, 3, 6, &mut rng).unwrap())
        .collect();
    let mut tape = Tape::inference();
    let input = vm.voxel_coords().clone();
    let mut x = SparseVoxelTensor::new(
        input.clone(),
        tape.leaf(random_tensor(input.len(), 6, &mut rng)),
        1.0,
    )
    .map_err(err)?;
    for b in &blocks {
        x = b.forward(&mut tape, &store, &x, &rules).map_err(err)?;
        ensure(*x.coords == *input && x.feats.rows() == input.len(), || {
            "active set changed".into()
        })?;
    }
    Ok(format!(
        "round trip within {round_trip:.1e}, unit attention exact, {} active voxels kept through 4 bottlenecks",
        input.len()
    ))
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        lr: 2e-4,
        lr_decay: 1.0,
        weight_decay: 0.0,
        batch_size: 1,
        seed: 0,
        augment: AugmentConfig::default(),
        ..Default::default()
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let scene = generate_scene(&SceneSpec::default()).map_err(err)?;
    ensure(scene.len() == 4096, || "scene size".into())?;
    let cfg = ModelConfig::outdoor(4);
    ensure(cfg.n_iterations == 2, || "preset iterations".into())?;
    let mut t = Trainer::new(cfg, overfit_config()).map_err(err)?;
    let train = [scene];
    t.run(&train, &[], Some(300), None, |_| {}).map_err(err)?;
    let m = t.evaluate(&train).map_err(err)?.metrics;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("acc {:.4}, mIoU {:.4}, {secs:.0} s", m.accuracy, m.miou);
    ensure(m.accuracy >= 0.98 && m.miou >= 0.90 && secs < 300.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let data = shape_dataset(6, 512, 6).map_err(err)?;
    let mut t =
        Trainer::new(ModelConfig::shape_classification(2), overfit_config()).map_err(err)?;
    let batch: Vec<(&PointCloud, u32)> = data.iter().map(|(p, c)| (p, *c)).collect();
    let clouds: Vec<&PointCloud> = data.iter().map(|(p, _)| p).collect();
    for step in 1..=200 {
        t.step_classification(&batch, 2e-4).map_err(err)?;
        let pred = t.classify(&clouds).map_err(err)?;
        if pred.iter().zip(&data).all(|(p, (_, c))| p == c) {
            return Ok(format!("{} clouds, 100% after {step} steps", data.len()));
        }
    }
    Err("train accuracy below 100% after 200 steps".into())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7() -> Outcome {
    let data = DataConfig {
        train_scenes: 4,
        val_scenes: 3,
        scene: SceneSpec {
            n_points: 2048,
            seed: 100,
            ..Default::default()
        },
        ..Default::default()
    };
    let (train, val) = data.load(255).map_err(err)?;
    let variants = [
        ("full", true, true),
        ("no_ms_pooling", false, true),
        ("no_attentive", true, false),
    ];
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        for (name, ms, att) in variants {
            let cfg = TrainConfig {
                lr: 1e-3,
                lr_decay: 1.0,
                batch_size: 2,
                seed,
                augment: AugmentConfig::outdoor(),
                ..Default::default()
            };
            let model = ModelConfig {
                multiscale_pooling: ms,
                attentive: att,
                ..ModelConfig::outdoor(4)
            };
            let mut t = Trainer::new(model, cfg).map_err(err)?;
            t.run(&train, &[], Some(100), None, |_| {}).map_err(err)?;
            scores
                .entry(name)
                .or_default()
                .push(t.evaluate(&val).map_err(err)?.metrics.miou);
        }
    }
    let med: BTreeMap<&str, f64> = scores
        .iter()
        .map(|(k, v)| (*k, median(v.clone())))
        .collect();
    let detail = format!(
        "median val mIoU full {:.4}, without MS pooling {:.4}, without attentive gathering {:.4}",
        med["full"], med["no_ms_pooling"], med["no_attentive"]
    );
    ensure(
        med["full"] >= med["no_ms_pooling"] && med["full"] >= med["no_attentive"],
        || detail.clone(),
    )?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let mut worst_ce: f64 = 0.0;
    for k in [2, 4, 20] {
        let mut tape = Tape::inference();
        let probs = tape.leaf(Tensor::filled(5, k, 1.0 / k as f64));
        let labels: Vec<u32> = (0..5).map(|i| (i % k) as u32).collect();
        let ce = cross_entropy(&mut tape, &probs, &labels, 255)
            .map_err(err)?
            .value()
            .item()
            .map_err(err)?;
        worst_ce = worst_ce.max((ce - (k as f64).ln()).abs());
    }
    ensure(worst_ce <= 1e-12, || {
        format!("uniform CE off by {worst_ce:.2e}")
    })?;

    let labels = [0u32, 2, 1, 1, 3];
    let mut onehot = Tensor::zeros(5, 4);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l as usize, 1.0);
    }
    let mut tape = Tape::inference();
    let probs = tape.leaf(onehot);
    let lz = lovasz_softmax(&mut tape, &probs, &labels, 255)
        .map_err(err)?
        .value()
        .item()
        .map_err(err)?;
    ensure(lz == 0.0, || {
        format!("Lovász on perfect predictions = {lz}")
    })?;

    let pred = [0, 1, 1, 1, 2, 2, 0];
    let truth = [0, 0, 1, 1, 2, 2, 2];
    let m = confusion_and_miou(&pred, &truth, 3, 255).map_err(err)?;
    let gap = (m.miou - 5.0 / 9.0).abs();
    ensure(gap <= f64::EPSILON, || format!("mIoU {} vs 5/9", m.miou))?;
    Ok(format!(
        "CE uniform within {worst_ce:.1e} of ln K, Lovász perfect = 0, mIoU {:.17} (5/9 within {gap:.1e})",
        m.miou
    ))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = DataConfig {
        train_scenes: 2,
        val_scenes: 1,
        scene: SceneSpec {
            n_points: 1024,
            seed: 9,
            ..Default::default()
        },
        ..Default::default()
    };
    let (train, val) = data.load(255).map_err(err)?;
    let cfg = TrainConfig {
        batch_size: 1,
        seed: 9,
        ..Default::default()
    };
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let mut t = Trainer::new(small_model(Head::Segmentation, 4), cfg.clone()).map_err(err)?;
        t.run(&train, &val, Some(6), Some(&out), |_| {})
            .map_err(err)?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(err);
        files.push((
            read("metrics.csv")?,
            read("steps.csv")?,
            read("checkpoint.driw")?,
        ));
    }
    ensure(files[0].0 == files[1].0, || "metrics CSVs differ".into())?;
    ensure(files[0].1 == files[1].1, || "step logs differ".into())?;
    ensure(files[0].2 == files[1].2, || "checkpoints differ".into())?;

    let ck = Checkpoint::from_bytes(&files[0].2).map_err(err)?;
    ensure(ck.to_bytes().map_err(err)? == files[0].2, || {
        "checkpoint bytes not reproduced".into()
    })?;
    let path = dir.path().join("copy.driw");
    ck.write(&path).map_err(err)?;
    let back = Checkpoint::read(Path::new(&path)).map_err(err)?;
    let bit_exact = back.records.len() == ck.records.len()
        && back
            .records
            .iter()
            .zip(&ck.records)
            .all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });
    ensure(bit_exact, || {
        "checkpoint values changed on round trip".into()
    })?;
    Ok(format!(
        "two seeded runs: metrics.csv ({} bytes) identical, checkpoint of {} records round-trips bit-exactly",
        files[0].0.len(),
        ck.records.len()
    ))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let coords = bench_cloud(100_000, 10).map_err(err)?.coords().to_vec();
    let intensity = Tensor::from_vec(
        coords.len(),
        1,
        (0..coords.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .map_err(err)?;
    let pc = PointCloud::new(coords, intensity, None).map_err(err)?;
    let cfg = ModelConfig::outdoor_full(20);
    ensure(
        cfg.n_iterations == 3 && cfg.pooling_scales.len() == 4,
        || "preset".into(),
    )?;
    let mut store = ParamStore::new();
    let model = DriNet::new(cfg, &mut store, &mut rng).map_err(err)?;
    let start = Instant::now();
    let out = model
        .forward_segmentation(&mut Tape::inference(), &store, &pc)
        .map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(out.pred.len() == pc.len(), || "prediction count".into())?;
    ensure(secs < 10.0, || format!("forward took {secs:.2} s"))?;
    let attentive = bench_op(BenchOp::Attentive, 100_000, 0.4, 64, 1, 0).map_err(err)?;
    let trilinear = bench_op(BenchOp::Trilinear, 100_000, 0.4, 64, 1, 0).map_err(err)?;
    Ok(format!(
        "100k-point forward {secs:.2} s; attentive {:.1} ms, trilinear {:.1} ms",
        attentive.seconds * 1e3,
        trilinear.seconds * 1e3
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient suite", criterion_1),
        ("oracle equivalence", criterion_2),
        ("invariance suite", criterion_3),
        ("structural identities", criterion_4),
        ("segmentation overfit", criterion_5),
        ("classification overfit", criterion_6),
        ("ablation direction", criterion_7),
        ("loss and metric hand cases", criterion_8),
        ("determinism", criterion_9),
        ("performance smoke", criterion_10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{}", k + 1);
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| *f == label || name.contains(f.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {label:>2} {name}: PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {label:>2} {name}: FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
