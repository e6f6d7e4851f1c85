use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use drinet_core::autograd::Tape;
use drinet_core::bench::{bench_op, table_header, BenchOp};
use drinet_core::checkpoint::Checkpoint;
use drinet_core::config::KeyValues;
use drinet_core::data::{read_lidar_bin, write_labels, write_ply};
use drinet_core::gradcheck;
use drinet_core::model::{argmax_rows, Head, ModelConfig};
use drinet_core::train::{
    check_config_keys, load_model, save_model, DataConfig, EpochReport, TrainConfig, Trainer,
};
use drinet_core::PointCloud;

#[derive(Parser)]
#[command(
    name = "drinet",
    version,
    about = "Point cloud segmentation with dual point/voxel features"
)]
struct Cli {
    /// Worker threads for the numeric kernels.
    #[arg(long, global = true, env = "DRINET_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a segmentation model.
    Train {
        /// key = value config file with model., train. and data. sections.
        #[arg(long)]
        config: PathBuf,
        /// Directory with velodyne/*.bin and labels/*.label; overrides data.dir.
        #[arg(long, conflicts_with = "synthetic")]
        data_dir: Option<PathBuf>,
        /// Train on generated scenes described by the data. keys.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        out_dir: PathBuf,
        /// Total optimizer steps instead of train.epochs full epochs.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint.driw written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict per-point labels for one frame.
    Infer {
        /// Weights file; the model config is read from <stem>.cfg or model.cfg beside it.
        #[arg(long)]
        checkpoint: PathBuf,
        /// LiDAR frame of (x, y, z, intensity) float32 records.
        #[arg(long)]
        frame: PathBuf,
        /// Label file to write, one u32 per point.
        #[arg(long)]
        out: PathBuf,
        /// Also write a coloured ASCII PLY.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the differentiable ops.
    Gradcheck {
        /// An op name or "all".
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the point/voxel transfer kernels.
    Bench {
        /// scatter, gather, attentive, trilinear or all.
        #[arg(long, default_value = "all")]
        op: String,
        /// Point counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [25_000usize, 50_000, 100_000])]
        points: Vec<usize>,
        /// Voxel size in metres.
        #[arg(long, default_value_t = 0.4)]
        scale: f64,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

/// Failure that should exit with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: cannot configure {} threads: {e}", cli.threads);
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Train {
            config,
            data_dir,
            synthetic,
            out_dir,
            steps,
            resume,
            seed,
        } => cmd_train(
            &config,
            data_dir,
            synthetic,
            &out_dir,
            steps,
            resume.as_deref(),
            seed,
        ),
        Command::Infer {
            checkpoint,
            frame,
            out,
            ply,
        } => cmd_infer(&checkpoint, &frame, &out, ply.as_deref()),
        Command::Gradcheck { module, seed } => cmd_gradcheck(&module, seed),
        Command::Bench {
            op,
            points,
            scale,
            channels,
            repeats,
        } => cmd_bench(&op, &points, scale, channels, repeats),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn print_epoch(r: &EpochReport) {
    let mut line = format!(
        "epoch {:>3}  lr {:.3e}  loss {:.4}",
        r.epoch, r.lr, r.train_loss
    );
    if let Some(t) = &r.train {
        line += &format!(
            "  train acc {:.4} mIoU {:.4}",
            t.metrics.accuracy, t.metrics.miou
        );
    }
    if let Some(v) = &r.val {
        line += &format!(
            "  val acc {:.4} mIoU {:.4}",
            v.metrics.accuracy, v.metrics.miou
        );
    }
    println!("{line}");
}

fn cmd_train(
    config: &Path,
    data_dir: Option<PathBuf>,
    synthetic: bool,
    out_dir: &Path,
    steps: Option<usize>,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    if !config.is_file() {
        return Err(UsageError(format!("config file {} not found", config.display())).into());
    }
    let kv = KeyValues::from_file(config)?;
    check_config_keys(&kv)?;
    let model_cfg = ModelConfig::from_kv(&kv)?;
    if model_cfg.head != Head::Segmentation {
        bail!("the train command fits segmentation models; set model.head = segmentation");
    }
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let mut data_cfg = DataConfig::from_kv(&kv, base)?;
    if synthetic {
        data_cfg.dir = None;
        data_cfg.val_dir = None;
    } else if let Some(d) = data_dir {
        data_cfg.dir = Some(d);
    }
    let (train, val) = data_cfg
        .load(model_cfg.ignore_index)
        .context("loading training data")?;
    for pc in train.iter().chain(&val) {
        pc.check_labels(model_cfg.num_classes, model_cfg.ignore_index)?;
    }

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut resolved = KeyValues::new();
    model_cfg.write_kv(&mut resolved);
    train_cfg.write_kv(&mut resolved);
    resolved.set_list("data.range_min", &data_cfg.range_min);
    resolved.set_list("data.range_max", &data_cfg.range_max);
    resolved.write_to(&out_dir.join("model.cfg"))?;

    let mut trainer = match resume {
        Some(path) => {
            let ck =
                Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
            Trainer::resume(model_cfg, train_cfg, &ck)?
        }
        None => Trainer::new(model_cfg, train_cfg)?,
    };
    println!(
        "training on {} clouds ({} validation), {} parameters",
        train.len(),
        val.len(),
        trainer.store.num_scalars()
    );
    let reports = trainer.run(&train, &val, steps, Some(out_dir), print_epoch)?;
    save_model(
        &out_dir.join("model.driw"),
        &trainer.model,
        &trainer.store,
        Some(&resolved),
    )?;

    let mut summary = format!("steps {}\n", trainer.step);
    if let Some(last) = reports.last() {
        if let Some(t) = &last.train {
            summary += &format!(
                "train_accuracy {:.6}\ntrain_miou {:.6}\n",
                t.metrics.accuracy, t.metrics.miou
            );
        }
        if let Some(v) = &last.val {
            summary += &format!(
                "val_accuracy {:.6}\nval_miou {:.6}\n",
                v.metrics.accuracy, v.metrics.miou
            );
        }
    }
    fs::write(out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(checkpoint: &Path, frame: &Path, out: &Path, ply: Option<&Path>) -> Result<ExitCode> {
    let (model, store, kv) = load_model(checkpoint)
        .with_context(|| format!("loading model {}", checkpoint.display()))?;
    let cfg = model.config();
    let defaults = DataConfig::default();
    let range = |key: &str, d: [f64; 3]| -> Result<[f64; 3]> {
        Ok(match kv.get_list::<f64>(key)? {
            Some(v) => v
                .try_into()
                .map_err(|_| anyhow::anyhow!("{key} needs three values"))?,
            None => d,
        })
    };
    let lo = range("data.range_min", defaults.range_min)?;
    let hi = range("data.range_max", defaults.range_max)?;
    let mut pc = read_lidar_bin(frame).with_context(|| format!("reading {}", frame.display()))?;
    if cfg.feat_dim == 0 {
        pc = PointCloud::from_coords(pc.coords().to_vec())?;
    }
    let pc = pc.clip_range(lo, hi, cfg.ignore_index)?;
    let pred = match cfg.head {
        Head::Segmentation => {
            model
                .forward_segmentation(&mut Tape::inference(), &store, &pc)?
                .pred
        }
        Head::Classification => {
            let logits = model.forward_classification(&mut Tape::inference(), &store, &pc)?;
            let class = argmax_rows(logits.value())[0];
            println!("class {class}");
            (0..pc.len())
                .map(|i| {
                    if pc.is_valid(i) {
                        class
                    } else {
                        cfg.ignore_index
                    }
                })
                .collect()
        }
    };
    write_labels(out, &pred)?;
    if let Some(path) = ply {
        write_ply(path, &pc, &pred, cfg.ignore_index)?;
    }
    println!("{} points, {} masked", pc.len(), pc.len() - pc.num_valid());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(module: &str, seed: u64) -> Result<ExitCode> {
    if module != "all" && !gradcheck::OPS.contains(&module) {
        return Err(UsageError(format!(
            "unknown module {module:?}; expected all or one of {}",
            gradcheck::OPS.join(", ")
        ))
        .into());
    }
    let reports = gradcheck::run(module, seed)?;
    println!("{:<20} {:>12} {:>8}", "op", "max rel err", "checked");
    for r in &reports {
        println!(
            "{:<20} {:>12.3e} {:>8}  {}",
            r.op,
            r.max_rel_err,
            r.n_checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(if reports.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_bench(
    op: &str,
    points: &[usize],
    scale: f64,
    channels: usize,
    repeats: usize,
) -> Result<ExitCode> {
    let ops: Vec<BenchOp> = if op == "all" {
        BenchOp::ALL.to_vec()
    } else {
        vec![op.parse().map_err(|e| UsageError(format!("{e}")))?]
    };
    if points.contains(&0) || !(scale > 0.0) || channels == 0 {
        return Err(UsageError("points, scale and channels must be positive".into()).into());
    }
    println!("{}", table_header());
    for &op in &ops {
        for &n in points {
            println!("{}", bench_op(op, n, scale, channels, repeats, 0)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
