//! The full network: geometry-aware features followed by `N_I` rounds of
//! point→voxel and voxel→point extraction, with a per-point segmentation
//! head or a max-pooled classification head.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::gafe::{check_scales, gafe_forward, GafeConfig, GafeParams};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scatter::ScatterReduce;
use crate::spvfe::SpvfeParams;
use crate::svpfe::SvpfeParams;
use crate::voxel::{PointCloud, VoxelPyramid};

pub const DEFAULT_IGNORE: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Segmentation,
    Classification,
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Self::Segmentation),
            "classification" => Ok(Self::Classification),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Segmentation => "segmentation",
            Self::Classification => "classification",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_iterations: usize,
    /// Voxel scale of each iteration's sparse voxel map.
    pub target_scales: Vec<f64>,
    /// Scales of the multi-scale pooling inside every point→voxel block.
    pub pooling_scales: Vec<f64>,
    pub gafe_scales: Vec<f64>,
    pub feat_dim: usize,
    pub num_classes: usize,
    pub head: Head,
    pub reduce: ScatterReduce,
    pub attentive: bool,
    pub multiscale_pooling: bool,
    /// Width of the geometry feature and of the initial point features.
    pub point_width: usize,
    pub gafe_mlp_width: usize,
    /// Per-scale width of the pooling MLPs.
    pub pool_width: usize,
    pub voxel_width: usize,
    pub bottleneck_mid: usize,
    pub n_bottlenecks: usize,
    pub head_hidden: usize,
    pub ignore_index: u32,
}

impl ModelConfig {
    /// Street-scene defaults: metric scales and an intensity attribute.
    pub fn outdoor(num_classes: usize) -> Self {
        Self {
            n_iterations: 2,
            target_scales: vec![0.4, 0.8],
            pooling_scales: vec![0.4, 0.8, 1.6, 3.2],
            gafe_scales: vec![0.4, 0.8, 1.6, 3.2],
            feat_dim: 1,
            num_classes,
            head: Head::Segmentation,
            reduce: ScatterReduce::Mean,
            attentive: true,
            multiscale_pooling: true,
            point_width: 32,
            gafe_mlp_width: 32,
            pool_width: 16,
            voxel_width: 64,
            bottleneck_mid: 16,
            n_bottlenecks: 2,
            head_hidden: 64,
            ignore_index: DEFAULT_IGNORE,
        }
    }

    /// The three-iteration variant with the full target scale list.
    pub fn outdoor_full(num_classes: usize) -> Self {
        Self {
            n_iterations: 3,
            target_scales: vec![0.4, 0.8, 1.6],
            ..Self::outdoor(num_classes)
        }
    }

    /// Object classification on clouds normalised to the unit cube.
    pub fn shape_classification(num_classes: usize) -> Self {
        Self {
            target_scales: vec![0.2, 0.2],
            pooling_scales: vec![0.2, 0.4, 0.6, 0.8],
            gafe_scales: vec![0.2, 0.4, 0.6, 0.8],
            feat_dim: 0,
            head: Head::Classification,
            ..Self::outdoor(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.target_scales.len() != self.n_iterations {
            return Err(Error::Config(format!(
                "{} target scales for {} iterations",
                self.target_scales.len(),
                self.n_iterations
            )));
        }
        check_scales("target", &self.target_scales)?;
        if self.pooling_scales.is_empty() {
            return Err(Error::Config("pooling needs at least one scale".into()));
        }
        check_scales("pooling", &self.pooling_scales)?;
        self.gafe_config().validate()?;
        let widths = [
            self.num_classes,
            self.point_width,
            self.gafe_mlp_width,
            self.pool_width,
            self.voxel_width,
            self.bottleneck_mid,
            self.head_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(
                "class count and layer widths must be positive".into(),
            ));
        }
        if (self.ignore_index as usize) < self.num_classes {
            return Err(Error::Config(format!(
                "ignore id {} collides with a class id",
                self.ignore_index
            )));
        }
        Ok(())
    }

    pub fn gafe_config(&self) -> GafeConfig {
        GafeConfig {
            scales: self.gafe_scales.clone(),
            mlp_width: self.gafe_mlp_width,
            out_channels: self.point_width,
            reduce: self.reduce,
        }
    }

    /// Every scale a forward pass voxelizes at, ascending and deduplicated.
    pub fn all_scales(&self) -> Vec<f64> {
        let bits: BTreeSet<u64> = self
            .gafe_scales
            .iter()
            .chain(&self.pooling_scales)
            .chain(&self.target_scales)
            .map(|s| s.to_bits())
            .collect();
        let mut scales: Vec<f64> = bits.into_iter().map(f64::from_bits).collect();
        scales.sort_by(f64::total_cmp);
        scales
    }

    /// Width of the concatenated per-iteration point features.
    pub fn concat_width(&self) -> usize {
        self.n_iterations * self.voxel_width
    }

    pub const KEYS: &'static [&'static str] = &[
        "n_iterations",
        "target_scales",
        "pooling_scales",
        "gafe_scales",
        "feat_dim",
        "num_classes",
        "head",
        "scatter_reduce",
        "attentive",
        "multiscale_pooling",
        "point_width",
        "gafe_mlp_width",
        "pool_width",
        "voxel_width",
        "bottleneck_mid",
        "n_bottlenecks",
        "head_hidden",
        "ignore_index",
    ];

    /// Reads `model.*` keys over the defaults for `num_classes`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let num_classes = kv
            .get::<usize>("model.num_classes")?
            .ok_or_else(|| Error::Config("model.num_classes is required".into()))?;
        let mut cfg = Self::outdoor(num_classes);
        let n: Option<usize> = kv.get("model.n_iterations")?;
        if let Some(n) = n {
            cfg.n_iterations = n;
            cfg.target_scales = Self::outdoor_full(num_classes).target_scales;
            cfg.target_scales
                .resize(n, *cfg.target_scales.last().expect("non-empty"));
        }
        if let Some(v) = kv.get_list("model.target_scales")? {
            cfg.target_scales = v;
        }
        if let Some(v) = kv.get_list("model.pooling_scales")? {
            cfg.pooling_scales = v;
        }
        if let Some(v) = kv.get_list("model.gafe_scales")? {
            cfg.gafe_scales = v;
        }
        cfg.feat_dim = kv.get_or("model.feat_dim", cfg.feat_dim)?;
        cfg.head = kv.get_or("model.head", cfg.head)?;
        cfg.reduce = kv.get_or("model.scatter_reduce", cfg.reduce)?;
        cfg.attentive = kv.get_or("model.attentive", cfg.attentive)?;
        cfg.multiscale_pooling = kv.get_or("model.multiscale_pooling", cfg.multiscale_pooling)?;
        cfg.point_width = kv.get_or("model.point_width", cfg.point_width)?;
        cfg.gafe_mlp_width = kv.get_or("model.gafe_mlp_width", cfg.gafe_mlp_width)?;
        cfg.pool_width = kv.get_or("model.pool_width", cfg.pool_width)?;
        cfg.voxel_width = kv.get_or("model.voxel_width", cfg.voxel_width)?;
        cfg.bottleneck_mid = kv.get_or("model.bottleneck_mid", cfg.bottleneck_mid)?;
        cfg.n_bottlenecks = kv.get_or("model.n_bottlenecks", cfg.n_bottlenecks)?;
        cfg.head_hidden = kv.get_or("model.head_hidden", cfg.head_hidden)?;
        cfg.ignore_index = kv.get_or("model.ignore_index", cfg.ignore_index)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("model.n_iterations", self.n_iterations);
        kv.set_list("model.target_scales", &self.target_scales);
        kv.set_list("model.pooling_scales", &self.pooling_scales);
        kv.set_list("model.gafe_scales", &self.gafe_scales);
        kv.set("model.feat_dim", self.feat_dim);
        kv.set("model.num_classes", self.num_classes);
        kv.set("model.head", self.head);
        kv.set("model.scatter_reduce", self.reduce);
        kv.set("model.attentive", self.attentive);
        kv.set("model.multiscale_pooling", self.multiscale_pooling);
        kv.set("model.point_width", self.point_width);
        kv.set("model.gafe_mlp_width", self.gafe_mlp_width);
        kv.set("model.pool_width", self.pool_width);
        kv.set("model.voxel_width", self.voxel_width);
        kv.set("model.bottleneck_mid", self.bottleneck_mid);
        kv.set("model.n_bottlenecks", self.n_bottlenecks);
        kv.set("model.head_hidden", self.head_hidden);
        kv.set("model.ignore_index", self.ignore_index);
    }
}

#[derive(Debug, Clone, PartialEq)]
enum HeadParams {
    Segmentation { hidden: Linear, out: Linear },
    Classification { fc: Linear },
}

/// Per-point predictions. `pred` holds the ignore id for masked points.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub logits: Var,
    pub probs: Var,
    pub pred: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriNet {
    cfg: ModelConfig,
    gafe: GafeParams,
    spvfe: Vec<SpvfeParams>,
    svpfe: Vec<SvpfeParams>,
    head: HeadParams,
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(t: &crate::tensor::Tensor) -> Vec<u32> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

impl DriNet {
    /// Registers all parameters in `store`.
    pub fn new<R: Rng>(cfg: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let gafe = GafeParams::new(store, &cfg.gafe_config(), cfg.feat_dim, rng)?;
        let (n_pool, pool_width) = if cfg.multiscale_pooling {
            (cfg.pooling_scales.len(), cfg.pool_width)
        } else {
            (1, cfg.pooling_scales.len() * cfg.pool_width)
        };
        let mut spvfe = Vec::with_capacity(cfg.n_iterations);
        let mut svpfe = Vec::with_capacity(cfg.n_iterations);
        for i in 0..cfg.n_iterations {
            let in_width = if i == 0 {
                cfg.point_width
            } else {
                cfg.voxel_width
            };
            spvfe.push(SpvfeParams::new(
                store,
                &format!("iter{i}.spvfe"),
                in_width,
                n_pool,
                pool_width,
                cfg.voxel_width,
                rng,
            )?);
            svpfe.push(SvpfeParams::new(
                store,
                &format!("iter{i}.svpfe"),
                cfg.voxel_width,
                cfg.bottleneck_mid,
                cfg.n_bottlenecks,
                cfg.attentive.then_some(cfg.point_width),
                rng,
            )?);
        }
        let head = match cfg.head {
            Head::Segmentation => HeadParams::Segmentation {
                hidden: Linear::new(
                    store,
                    "head.hidden",
                    cfg.concat_width(),
                    cfg.head_hidden,
                    true,
                    rng,
                )?,
                out: Linear::new(
                    store,
                    "head.out",
                    cfg.head_hidden,
                    cfg.num_classes,
                    true,
                    rng,
                )?,
            },
            Head::Classification => HeadParams::Classification {
                fc: Linear::new(
                    store,
                    "head.fc",
                    cfg.concat_width(),
                    cfg.num_classes,
                    true,
                    rng,
                )?,
            },
        };
        Ok(Self {
            cfg,
            gafe,
            spvfe,
            svpfe,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn voxel_pyramid(&self, pc: &PointCloud) -> Result<VoxelPyramid> {
        VoxelPyramid::build(pc, &self.cfg.all_scales())
    }

    /// Concatenation of the point features after every iteration,
    /// `N x (N_I · voxel_width)`.
    pub fn point_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
        maps: &VoxelPyramid,
    ) -> Result<Var> {
        if pc.num_valid() == 0 {
            return Err(Error::EmptyInput);
        }
        if pc.feat_dim() != self.cfg.feat_dim {
            return Err(Error::Config(format!(
                "model expects {} point attributes, cloud has {}",
                self.cfg.feat_dim,
                pc.feat_dim()
            )));
        }
        let cfg = &self.cfg;
        let geometry = gafe_forward(tape, pc, maps, &cfg.gafe_config(), &self.gafe, store)?;
        let pool_maps = if cfg.multiscale_pooling {
            cfg.pooling_scales
                .iter()
                .map(|&s| maps.get(s))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut fp = geometry.clone();
        let mut outs = Vec::with_capacity(cfg.n_iterations);
        for ((sp, sv), &target) in self.spvfe.iter().zip(&self.svpfe).zip(&cfg.target_scales) {
            let target_map = maps.get(target)?;
            let single = [target_map];
            let pools: &[_] = if cfg.multiscale_pooling {
                &pool_maps
            } else {
                &single
            };
            let fv = sp.forward(tape, store, &fp, pools, target_map, cfg.reduce)?;
            fp = sv.forward(tape, store, fv, target_map, &geometry)?;
            outs.push(fp.clone());
        }
        let refs: Vec<&Var> = outs.iter().collect();
        let concat = tape.concat_cols(&refs)?;
        debug_assert_eq!(concat.cols(), cfg.concat_width());
        Ok(concat)
    }

    pub fn forward_segmentation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
    ) -> Result<SegmentationOutput> {
        let HeadParams::Segmentation { hidden, out } = &self.head else {
            return Err(Error::Config("model has a classification head".into()));
        };
        let maps = self.voxel_pyramid(pc)?;
        let feats = self.point_features(tape, store, pc, &maps)?;
        let h = hidden.forward_relu(tape, store, &feats)?;
        let logits = out.forward(tape, store, &h)?;
        let probs = tape.softmax_rows(&logits)?;
        let mut pred = argmax_rows(probs.value());
        for (i, p) in pred.iter_mut().enumerate() {
            if !pc.is_valid(i) {
                *p = self.cfg.ignore_index;
            }
        }
        Ok(SegmentationOutput {
            logits,
            probs,
            pred,
        })
    }

    /// `1 x num_classes` logits from the column-wise max over unmasked points.
    pub fn forward_classification(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pc: &PointCloud,
    ) -> Result<Var> {
        let HeadParams::Classification { fc } = &self.head else {
            return Err(Error::Config("model has a segmentation head".into()));
        };
        let maps = self.voxel_pyramid(pc)?;
        let feats = self.point_features(tape, store, pc, &maps)?;
        let valid: Vec<usize> = (0..pc.len()).filter(|&i| pc.is_valid(i)).collect();
        let feats = if valid.len() == pc.len() {
            feats
        } else {
            tape.select_rows(&feats, &valid)?
        };
        let pooled = tape.reduce_max_rows(&feats)?;
        fc.forward(tape, store, &pooled)
    }

    /// Labels with masked points forced to the ignore id.
    pub fn effective_labels(&self, pc: &PointCloud) -> Result<Vec<u32>> {
        let labels = pc
            .labels()
            .ok_or_else(|| Error::Data("cloud has no labels".into()))?;
        pc.check_labels(self.cfg.num_classes, self.cfg.ignore_index)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if pc.is_valid(i) {
                    l
                } else {
                    self.cfg.ignore_index
                }
            })
            .collect())
    }
}
