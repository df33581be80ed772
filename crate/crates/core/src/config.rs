//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{AugmentConfig, CropCorner};
use crate::error::{Error, Result};
use crate::fusion::RelationApply;
use crate::rgb_stream::BackboneConfig;
use crate::skeleton_stream::{LstmConfig, PartitionStrategy, StgcnConfig};
use crate::synthdata;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonBackbone {
    Stgcn,
    Bilstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenation head with L2 normalization.
    Lstm,
    /// Relation-mask fusion over the combined feature.
    Gcn,
    /// Weighted sum of the two stream heads' probabilities.
    Decision,
    /// Projected feature sum followed by a classifier.
    Sum,
}

/// How per-frame RGB features are merged when several frames are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMerge {
    #[default]
    Mean,
    Max,
}

/// Architecture of both streams and the fusion module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: SkeletonBackbone,
    pub fusion: FusionMode,
    /// Pooled feature width `D` of each RGB attention part in LSTM mode.
    pub feature_dim: usize,
    pub self_attention: bool,
    pub skeleton_attention: bool,
    /// Side of the skeleton-attention square relative to the crop's short side.
    pub square_frac: f64,
    pub relation_apply: RelationApply,
    pub frame_merge: FrameMerge,
    /// `θ`/`φ` width; 0 selects `(C_S + C_R) / 2`.
    pub relation_inner: usize,
    /// Output channels of the fusion head's 1×1 convolution.
    pub head_channels: usize,
    /// Hidden width of the fusion FC layers.
    pub fusion_hidden: usize,
    /// Weight of the skeleton stream in decision fusion.
    pub decision_weight: f64,
    pub edges: Vec<(usize, usize)>,
    pub joints: usize,
    pub partition: PartitionStrategy,
    pub stgcn: StgcnConfig,
    pub lstm: LstmConfig,
    pub rgb: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: SkeletonBackbone::Stgcn,
            fusion: FusionMode::Gcn,
            feature_dim: 16,
            self_attention: true,
            skeleton_attention: true,
            square_frac: 0.25,
            relation_apply: RelationApply::Aggregate,
            frame_merge: FrameMerge::Mean,
            relation_inner: 0,
            head_channels: 32,
            fusion_hidden: 32,
            decision_weight: 0.5,
            edges: synthdata::EDGES.to_vec(),
            joints: synthdata::REST_POSE.len(),
            partition: PartitionStrategy::Spatial {
                center: synthdata::TORSO,
            },
            stgcn: StgcnConfig::default(),
            lstm: LstmConfig::default(),
            rgb: BackboneConfig::default(),
        }
    }
}

/// Preprocessing and augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Frame positions (fractions of `T − 1`) whose RGB features are averaged.
    pub frame_fractions: Vec<f64>,
    pub va_pre: bool,
    /// Uniform-stride resampling target; 0 keeps every frame.
    pub target_frames: usize,
    /// Zero-padding length after resampling; 0 disables padding.
    pub pad_frames: usize,
    /// Skeleton rotation/scale expansion of the training set.
    pub augmentation: bool,
    pub projection_crop: bool,
    pub augment: AugmentConfig,
    pub crop_margin_range: (f64, f64),
    pub crop_corners: Vec<CropCorner>,
    /// Crop variants per original sample (cycled through `crop_corners`).
    pub crop_variants: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frame_fractions: vec![0.5],
            va_pre: true,
            target_frames: 0,
            pad_frames: 0,
            augmentation: true,
            projection_crop: true,
            augment: AugmentConfig::default(),
            crop_margin_range: (100.0, 300.0),
            crop_corners: CropCorner::ALL_FOUR.to_vec(),
            crop_variants: 4,
        }
    }
}

/// Optimizer and stage schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs_stream: usize,
    pub epochs_fusion: usize,
    pub epochs_finetune: usize,
    /// Learning rate multiplier during fine-tuning.
    pub finetune_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.1,
            decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs_stream: 30,
            epochs_fusion: 20,
            epochs_finetune: 10,
            finetune_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// `lr · decay^⌊epoch / decay_every⌋`. When `1/decay` is an integer the
    /// schedule divides by its power instead, so `1e-4 → 1e-5 → 1e-6` is exact.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every.max(1)) as i32;
        let inv = 1.0 / self.decay;
        if (inv - inv.round()).abs() < 1e-9 {
            self.lr / inv.round().powi(k)
        } else {
            self.lr * self.decay.powi(k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        // written negated so NaN fails too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(
                "train: lr must be > 0 and decay in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a training or evaluation run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/synth"),
            out_dir: PathBuf::from("runs/default"),
            seed: 7,
            deterministic: false,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// The desk-scale configuration used for the synthetic reference dataset.
    pub fn reference() -> Self {
        let mut cfg = Self::default();
        cfg.data.crop_margin_range = (4.0, 12.0);
        cfg.train.lr = 3e-3;
        cfg.train.batch_size = 16;
        cfg.train.epochs_stream = 12;
        cfg.train.epochs_fusion = 10;
        cfg.train.epochs_finetune = 4;
        cfg.train.finetune_lr_scale = 0.1;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let m = &self.model;
        if m.fusion == FusionMode::Gcn && m.backbone != SkeletonBackbone::Stgcn {
            return Err(Error::Config("gcn fusion needs the stgcn backbone".into()));
        }
        if !(0.0..=1.0).contains(&m.decision_weight) {
            return Err(Error::Config("decision_weight must lie in [0, 1]".into()));
        }
        if m.square_frac < 0.0 || m.feature_dim == 0 {
            return Err(Error::Config(
                "square_frac must be >= 0 and feature_dim positive".into(),
            ));
        }
        let d = &self.data;
        if d.frame_fractions.is_empty()
            || d.frame_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::Config(
                "frame_fractions must be non-empty and within [0, 1]".into(),
            ));
        }
        if d.crop_corners.is_empty()
            || d.crop_margin_range.0 < 0.0
            || d.crop_margin_range.1 < d.crop_margin_range.0
        {
            return Err(Error::Config(
                "crop corners must be non-empty and the margin range ordered and non-negative"
                    .into(),
            ));
        }
        if d.pad_frames != 0 && d.pad_frames < d.target_frames {
            return Err(Error::Config("pad_frames must be >= target_frames".into()));
        }
        m.stgcn.validate()?;
        m.rgb.validate()?;
        Ok(())
    }

    /// Fractions used by the frame-count ablation.
    pub fn fractions_for_count(count: usize) -> Result<Vec<f64>> {
        match count {
            1 => Ok(vec![0.5]),
            3 => Ok(vec![0.3, 0.5, 0.7]),
            5 => Ok(vec![0.3, 0.4, 0.5, 0.6, 0.7]),
            n => Err(Error::UnknownVariant(format!("frame_count:{n}"))),
        }
    }
}
