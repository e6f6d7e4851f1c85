//! Training loop: batched Adam updates, step-decayed learning rate, per-epoch
//! evaluation, metrics CSV and resumable checkpoints.
//!
//! Randomness is derived from the seed and the global step (augmentation)
//! or epoch (shuffling), so a run resumed from a checkpoint continues
//! exactly as the uninterrupted run would have.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugmentConfig};
use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::data::{generate_scene, load_frames_dir, LabelRemap, SceneSpec};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, segmentation_loss};
use crate::metrics::{csv_header, csv_row, ConfusionMatrix, SegMetrics};
use crate::model::{argmax_rows, DriNet, ModelConfig};
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::voxel::PointCloud;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; defaults to one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub ce_weight: f64,
    pub lovasz_weight: f64,
    /// Epochs between evaluations; the last epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            lr_decay: 0.8,
            decay_every: 5,
            epochs: 40,
            batch_size: 4,
            steps_per_epoch: None,
            seed: 0,
            augment: AugmentConfig::outdoor(),
            ce_weight: 1.0,
            lovasz_weight: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "weight_decay",
        "lr_decay",
        "decay_every",
        "epochs",
        "batch_size",
        "steps_per_epoch",
        "seed",
        "augment_rotate",
        "augment_flip",
        "augment_scale",
        "augment_jitter",
        "ce_weight",
        "lovasz_weight",
        "eval_every",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.ce_weight + self.lovasz_weight];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "learning rate and loss weights must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.ce_weight < 0.0 || self.lovasz_weight < 0.0 {
            return Err(Error::Config(
                "weight decay and loss weights must be non-negative".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.decay_every == 0 || self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0
        {
            return Err(Error::Config(
                "epoch counts and batch size must be positive".into(),
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps per epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let a = d.augment;
        let cfg = Self {
            lr: kv.get_or("train.lr", d.lr)?,
            weight_decay: kv.get_or("train.weight_decay", d.weight_decay)?,
            lr_decay: kv.get_or("train.lr_decay", d.lr_decay)?,
            decay_every: kv.get_or("train.decay_every", d.decay_every)?,
            epochs: kv.get_or("train.epochs", d.epochs)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            steps_per_epoch: kv.get("train.steps_per_epoch")?,
            seed: kv.get_or("train.seed", d.seed)?,
            augment: AugmentConfig {
                rotate: kv.get_or("train.augment_rotate", a.rotate)?,
                flip: kv.get_or("train.augment_flip", a.flip)?,
                scale: kv.get_or("train.augment_scale", a.scale)?,
                jitter: kv.get_or("train.augment_jitter", a.jitter)?,
            },
            ce_weight: kv.get_or("train.ce_weight", d.ce_weight)?,
            lovasz_weight: kv.get_or("train.lovasz_weight", d.lovasz_weight)?,
            eval_every: kv.get_or("train.eval_every", d.eval_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("train.lr", self.lr);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.lr_decay", self.lr_decay);
        kv.set("train.decay_every", self.decay_every);
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        if let Some(s) = self.steps_per_epoch {
            kv.set("train.steps_per_epoch", s);
        }
        kv.set("train.seed", self.seed);
        kv.set("train.augment_rotate", self.augment.rotate);
        kv.set("train.augment_flip", self.augment.flip);
        kv.set("train.augment_scale", self.augment.scale);
        kv.set("train.augment_jitter", self.augment.jitter);
        kv.set("train.ce_weight", self.ce_weight);
        kv.set("train.lovasz_weight", self.lovasz_weight);
        kv.set("train.eval_every", self.eval_every);
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        learning_rate(self.lr, self.lr_decay, self.decay_every, epoch)
    }
}

/// Where training clouds come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Directory with `velodyne/` and `labels/`; `None` means synthetic scenes.
    pub dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub remap: Option<PathBuf>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneSpec,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            val_dir: None,
            remap: None,
            train_scenes: 1,
            val_scenes: 1,
            scene: SceneSpec::default(),
            range_min: [-48.0, -48.0, -3.0],
            range_max: [48.0, 48.0, 1.8],
        }
    }
}

fn triple(v: Option<Vec<f64>>, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    match v {
        None => Ok(default),
        Some(v) => v
            .try_into()
            .map_err(|_| Error::Config(format!("{key} needs three values"))),
    }
}

impl DataConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dir",
        "val_dir",
        "remap",
        "train_scenes",
        "val_scenes",
        "points",
        "extent",
        "boxes",
        "poles",
        "clutter",
        "seed",
        "range_min",
        "range_max",
    ];

    /// Relative paths resolve against `base` (the config file's directory).
    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self> {
        let d = Self::default();
        let path = |key: &str| kv.get_str(key).map(|p| base.join(p));
        let s = d.scene;
        Ok(Self {
            dir: path("data.dir"),
            val_dir: path("data.val_dir"),
            remap: path("data.remap"),
            train_scenes: kv.get_or("data.train_scenes", d.train_scenes)?,
            val_scenes: kv.get_or("data.val_scenes", d.val_scenes)?,
            scene: SceneSpec {
                n_points: kv.get_or("data.points", s.n_points)?,
                extent: kv.get_or("data.extent", s.extent)?,
                n_boxes: kv.get_or("data.boxes", s.n_boxes)?,
                n_poles: kv.get_or("data.poles", s.n_poles)?,
                n_clutter: kv.get_or("data.clutter", s.n_clutter)?,
                seed: kv.get_or("data.seed", s.seed)?,
            },
            range_min: triple(
                kv.get_list("data.range_min")?,
                "data.range_min",
                d.range_min,
            )?,
            range_max: triple(
                kv.get_list("data.range_max")?,
                "data.range_max",
                d.range_max,
            )?,
        })
    }

    /// Synthetic train scenes use seeds `seed, seed+1, …`; validation
    /// scenes continue after them.
    pub fn synthetic_split(&self) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
        let gen = |k: usize| {
            generate_scene(&SceneSpec {
                seed: self.scene.seed + k as u64,
                ..self.scene
            })
        };
        let train = (0..self.train_scenes)
            .map(gen)
            .collect::<Result<Vec<_>>>()?;
        let val = (self.train_scenes..self.train_scenes + self.val_scenes)
            .map(gen)
            .collect::<Result<Vec<_>>>()?;
        Ok((train, val))
    }

    /// Loads the configured clouds and applies the range mask.
    pub fn load(&self, ignore: u32) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
        let (train, val) = match &self.dir {
            None => self.synthetic_split()?,
            Some(dir) => {
                let remap = self
                    .remap
                    .as_deref()
                    .map(LabelRemap::from_file)
                    .transpose()?;
                let read = |d: &Path| -> Result<Vec<PointCloud>> {
                    Ok(load_frames_dir(d, remap.as_ref())?
                        .into_iter()
                        .map(|(_, pc)| pc)
                        .collect())
                };
                let train = read(dir)?;
                let val = match &self.val_dir {
                    Some(v) => read(v)?,
                    None => Vec::new(),
                };
                (train, val)
            }
        };
        let clip = |v: Vec<PointCloud>| -> Result<Vec<PointCloud>> {
            v.into_iter()
                .map(|pc| pc.clip_range(self.range_min, self.range_max, ignore))
                .collect()
        };
        Ok((clip(train)?, clip(val)?))
    }
}

/// The key sections a training config file may contain.
pub fn check_config_keys(kv: &KeyValues) -> Result<()> {
    kv.reject_unknown(&[
        ("model.", ModelConfig::KEYS),
        ("train.", TrainConfig::KEYS),
        ("data.", DataConfig::KEYS),
    ])
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub metrics: SegMetrics,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train: Option<EvalResult>,
    pub val: Option<EvalResult>,
}

pub struct Trainer {
    pub model: DriNet,
    pub store: ParamStore,
    pub adam: Adam,
    pub cfg: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = DriNet::new(
            model_cfg,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        )?;
        let adam = Adam::new(&store, cfg.adam());
        Ok(Self {
            model,
            store,
            adam,
            cfg,
            step: 0,
        })
    }

    /// Parameters, optimizer moments and step counter from a checkpoint.
    pub fn resume(model_cfg: ModelConfig, cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(model_cfg, cfg)?;
        ck.restore_params(&mut t.store)?;
        if let Some(adam) = ck.restore_adam(&t.store, t.cfg.adam())? {
            t.adam = adam;
        }
        t.step = ck.state("train.step").unwrap_or(0.0) as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::capture(&self.store, Some(&self.adam));
        ck.set_state("train.step", self.step as f64);
        ck
    }

    fn steps_per_epoch(&self, n_train: usize) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| n_train.div_ceil(self.cfg.batch_size))
    }

    /// Cloud indices of the batch for global step `step`.
    fn batch_for(&self, step: usize, n_train: usize) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch(n_train);
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, (1 << 40) + epoch as u64));
        let start = (step % per_epoch) * self.cfg.batch_size;
        (start..start + self.cfg.batch_size.min(n_train))
            .map(|k| order[k % n_train])
            .collect()
    }

    /// One optimizer step on a batch of labelled clouds at learning rate
    /// `lr`; returns the mean loss. Gradients are averaged over the batch.
    pub fn step_segmentation(&mut self, batch: &[&PointCloud], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        self.store.zero_grads();
        let mut rng = stream_rng(self.cfg.seed, self.step as u64 + 1);
        let scale = 1.0 / batch.len() as f64;
        let ignore = self.model.config().ignore_index;
        let mut total = 0.0;
        for pc in batch {
            let pc = if self.cfg.augment.is_identity() {
                (*pc).clone()
            } else {
                augment(pc, &self.cfg.augment, &mut rng)
            };
            let labels = self.model.effective_labels(&pc)?;
            let mut tape = Tape::new();
            let out = self
                .model
                .forward_segmentation(&mut tape, &self.store, &pc)?;
            let loss = segmentation_loss(
                &mut tape,
                &out.probs,
                &labels,
                ignore,
                self.cfg.ce_weight,
                self.cfg.lovasz_weight,
            )?;
            total += loss.value().item()?;
            let scaled = tape.scale(&loss, scale)?;
            tape.backward(&scaled, &mut self.store)?;
        }
        self.adam.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(total * scale)
    }

    /// Cross-entropy step for a classification model.
    pub fn step_classification(&mut self, batch: &[(&PointCloud, u32)], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        self.store.zero_grads();
        let mut rng = stream_rng(self.cfg.seed, self.step as u64 + 1);
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (pc, label) in batch {
            let pc = if self.cfg.augment.is_identity() {
                (*pc).clone()
            } else {
                augment(pc, &self.cfg.augment, &mut rng)
            };
            let mut tape = Tape::new();
            let logits = self
                .model
                .forward_classification(&mut tape, &self.store, &pc)?;
            let probs = tape.softmax_rows(&logits)?;
            let loss = cross_entropy(
                &mut tape,
                &probs,
                &[*label],
                self.model.config().ignore_index,
            )?;
            total += loss.value().item()?;
            let scaled = tape.scale(&loss, scale)?;
            tape.backward(&scaled, &mut self.store)?;
        }
        self.adam.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(total * scale)
    }

    /// Predicted class per shape.
    pub fn classify(&self, clouds: &[&PointCloud]) -> Result<Vec<u32>> {
        clouds
            .iter()
            .map(|pc| {
                let logits =
                    self.model
                        .forward_classification(&mut Tape::inference(), &self.store, pc)?;
                Ok(argmax_rows(logits.value())[0])
            })
            .collect()
    }

    /// Metrics and mean loss over `clouds`, without augmentation.
    pub fn evaluate(&self, clouds: &[PointCloud]) -> Result<EvalResult> {
        let cfg = self.model.config();
        let mut cm = ConfusionMatrix::new(cfg.num_classes);
        let mut loss = 0.0;
        for pc in clouds {
            let labels = self.model.effective_labels(pc)?;
            let mut tape = Tape::inference();
            let out = self
                .model
                .forward_segmentation(&mut tape, &self.store, pc)?;
            let l = segmentation_loss(
                &mut tape,
                &out.probs,
                &labels,
                cfg.ignore_index,
                self.cfg.ce_weight,
                self.cfg.lovasz_weight,
            )?;
            loss += l.value().item()?;
            cm.add(&out.pred, &labels, cfg.ignore_index)?;
        }
        Ok(EvalResult {
            metrics: cm.metrics(),
            loss: if clouds.is_empty() {
                0.0
            } else {
                loss / clouds.len() as f64
            },
        })
    }

    /// Trains until `total_steps` optimizer steps have been taken (default:
    /// `epochs · steps_per_epoch`), continuing from `self.step`.
    ///
    /// With an output directory, writes `metrics.csv` (one train and one
    /// val row per evaluated epoch), `steps.csv` (loss per step) and
    /// `checkpoint.driw` after every epoch.
    pub fn run(
        &mut self,
        train: &[PointCloud],
        val: &[PointCloud],
        total_steps: Option<usize>,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Vec<EpochReport>> {
        if train.is_empty() {
            return Err(Error::Data("no training clouds".into()));
        }
        let per_epoch = self.steps_per_epoch(train.len());
        let total = total_steps.unwrap_or(self.cfg.epochs * per_epoch);
        let last_epoch = total.div_ceil(per_epoch).saturating_sub(1);
        let k = self.model.config().num_classes;
        let mut writers = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let resumed = self.step > 0;
                let open = |name: &str, header: &str| -> Result<fs::File> {
                    let path = dir.join(name);
                    let fresh = !resumed || !path.exists();
                    let mut f = OpenOptions::new()
                        .create(true)
                        .append(!fresh)
                        .write(true)
                        .truncate(fresh)
                        .open(path)?;
                    if fresh {
                        writeln!(f, "{header}")?;
                    }
                    Ok(f)
                };
                Some((
                    open("metrics.csv", &csv_header(k))?,
                    open("steps.csv", "step,epoch,lr,loss")?,
                ))
            }
            None => None,
        };
        let mut reports = Vec::new();
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        while self.step < total {
            let epoch = self.step / per_epoch;
            let lr = self.cfg.lr_at_epoch(epoch);
            let batch: Vec<&PointCloud> = self
                .batch_for(self.step, train.len())
                .into_iter()
                .map(|i| &train[i])
                .collect();
            let loss = self.step_segmentation(&batch, lr)?;
            epoch_loss += loss;
            epoch_steps += 1;
            if let Some((_, steps)) = writers.as_mut() {
                writeln!(steps, "{},{epoch},{lr:e},{loss:.17e}", self.step)?;
            }
            let epoch_done = self.step.is_multiple_of(per_epoch) || self.step == total;
            if !epoch_done {
                continue;
            }
            let evaluate = epoch == last_epoch || (epoch + 1).is_multiple_of(self.cfg.eval_every);
            let (train_eval, val_eval) = if evaluate {
                let v = if val.is_empty() {
                    None
                } else {
                    Some(self.evaluate(val)?)
                };
                (Some(self.evaluate(train)?), v)
            } else {
                (None, None)
            };
            let report = EpochReport {
                epoch,
                lr,
                train_loss: epoch_loss / epoch_steps as f64,
                train: train_eval,
                val: val_eval,
            };
            epoch_loss = 0.0;
            epoch_steps = 0;
            if let (Some((metrics, _)), Some(dir)) = (writers.as_mut(), out_dir) {
                for (split, r) in [("train", &report.train), ("val", &report.val)] {
                    if let Some(r) = r {
                        writeln!(metrics, "{}", csv_row(epoch, split, &r.metrics, r.loss))?;
                    }
                }
                self.checkpoint().write(&dir.join("checkpoint.driw"))?;
            }
            on_epoch(&report);
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Writes the weights to `path` (parameters only) and the model
/// description to `<stem>.cfg`, plus any `extra` keys.
pub fn save_model(
    path: &Path,
    model: &DriNet,
    store: &ParamStore,
    extra: Option<&KeyValues>,
) -> Result<()> {
    Checkpoint::capture(store, None).write(path)?;
    let mut kv = extra.cloned().unwrap_or_default();
    model.config().write_kv(&mut kv);
    kv.write_to(&path.with_extension("cfg"))
}

/// `<stem>.cfg` next to the weights, or `model.cfg` in the same directory.
pub fn model_config_path(weights: &Path) -> PathBuf {
    let own = weights.with_extension("cfg");
    if own.exists() {
        return own;
    }
    weights.with_file_name("model.cfg")
}

/// Rebuilds a model from its config file and loads the weights in `path`.
/// Returns the parsed config alongside, for keys outside `model.`.
pub fn load_model(path: &Path) -> Result<(DriNet, ParamStore, KeyValues)> {
    let kv = KeyValues::from_file(&model_config_path(path))?;
    let cfg = ModelConfig::from_kv(&kv)?;
    let mut store = ParamStore::new();
    let model = DriNet::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    Checkpoint::read(path)?.restore_params(&mut store)?;
    Ok((model, store, kv))
}
