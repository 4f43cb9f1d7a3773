//! Two-stage training protocol and the ablation configuration matrix.
//!
//! Stage 1 trains the thickness regressor on ground-truth masks and freezes
//! it; stage 2 trains the segmentation networks under the combined
//! objective, with the frozen regressor contributing the biomarker term.
//! `ablation_mode` selects which pieces participate, mirroring the method's
//! ablation rows: plain local net, global module alone, cascade without the
//! biomarker, local net with the biomarker, and the full pipeline.

pub mod augment;
mod stages;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::domain::DomainError;
use crate::losses::{LossError, LossWeights, MultilayerLossKind};
use crate::metrics::{MetricsError, MetricsReport};
use crate::nn::NetworkError;

pub use augment::{augment, hflip, rotate, AugmentConfig};
pub use stages::{
    evaluate_model, load_bundle, load_frozen_bio, save_bundle, train_bio_stage,
    train_cascade_stage, ChoroidPredictor, ModelBundle, OracleModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) in {stage} at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },
    #[error("frozen biomarker network changed during training (digest mismatch)")]
    FrozenNetworkChanged,
    #[error("ablation mode {0} requires a biomarker network")]
    MissingBioNetwork(AblationMode),
    #[error("biomarker network must be frozen before stage 2")]
    BioNotFrozen,
    #[error("dataset split is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("bundle i/o failed on {path}: {source}")]
    BundleIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt bundle {path}: {reason}")]
    CorruptBundle {
        path: std::path::PathBuf,
        reason: String,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Which pipeline pieces train, mirroring the ablation table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Local segmentation net alone on the raw image.
    #[serde(rename = "unet")]
    Unet,
    /// Global multi-layer module alone; the choroid is read off its
    /// choroid-class channel.
    #[serde(rename = "gms")]
    Gms,
    /// Cascade without the biomarker term.
    #[serde(rename = "unet+gms")]
    UnetGms,
    /// Local net with the biomarker regularizer, no cascade.
    #[serde(rename = "unet+bio")]
    UnetBio,
    /// Full pipeline: cascade plus biomarker regularizer.
    #[serde(rename = "bionet")]
    Bionet,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Unet,
        AblationMode::Gms,
        AblationMode::UnetGms,
        AblationMode::UnetBio,
        AblationMode::Bionet,
    ];

    pub fn uses_bio(self) -> bool {
        matches!(self, AblationMode::UnetBio | AblationMode::Bionet)
    }

    pub fn uses_global(self) -> bool {
        matches!(
            self,
            AblationMode::Gms | AblationMode::UnetGms | AblationMode::Bionet
        )
    }

    pub fn uses_local(self) -> bool {
        !matches!(self, AblationMode::Gms)
    }

    /// Local module consumes image + global probabilities.
    pub fn is_cascade(self) -> bool {
        matches!(self, AblationMode::UnetGms | AblationMode::Bionet)
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AblationMode::Unet => "unet",
            AblationMode::Gms => "gms",
            AblationMode::UnetGms => "unet+gms",
            AblationMode::UnetBio => "unet+bio",
            AblationMode::Bionet => "bionet",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unet" => Ok(AblationMode::Unet),
            "gms" => Ok(AblationMode::Gms),
            "unet+gms" => Ok(AblationMode::UnetGms),
            "unet+bio" => Ok(AblationMode::UnetBio),
            "bionet" => Ok(AblationMode::Bionet),
            other => Err(format!(
                "unknown mode {other:?} (expected unet, gms, unet+gms, unet+bio or bionet)"
            )),
        }
    }
}

/// What the biomarker regularizer compares the predicted thickness against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BioTargetKind {
    /// The sample's ground-truth thickness.
    GroundTruth,
    /// The frozen network's own reading of the ground-truth mask.
    BioOfGtMask,
}

/// Whether stage 2 trains everything jointly from the start or pretrains
/// the global module first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageSchedule {
    Joint,
    Sequential,
}

/// Whether the decay boundaries count epochs or optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayUnit {
    Epochs,
    Steps,
}

/// Full training configuration; serializes to a flat key-value TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub augmentation: AugmentConfig,
    pub ablation_mode: AblationMode,
    pub base_width: usize,
    pub depth: usize,
    pub bio_head_width: usize,
    #[serde(flatten)]
    pub loss_weights: LossWeights,
    pub multilayer_loss: MultilayerLossKind,
    pub bio_target: BioTargetKind,
    pub schedule: StageSchedule,
    /// Epochs of global-only training when `schedule = sequential`.
    pub pretrain_epochs: usize,
    pub decay_unit: DecayUnit,
    /// Probability of blurring a ground-truth mask during stage 1, so the
    /// regressor generalizes to the soft maps it sees in stage 2.
    pub mask_blur_prob: f64,
    pub mask_blur_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            base_lr: 0.01,
            lr_decay_epochs: vec![40, 80, 160, 240],
            lr_decay_factor: 0.1,
            seed: 0,
            augmentation: AugmentConfig::default(),
            ablation_mode: AblationMode::Bionet,
            base_width: 64,
            depth: 4,
            bio_head_width: 64,
            loss_weights: LossWeights::default(),
            multilayer_loss: MultilayerLossKind::Categorical,
            bio_target: BioTargetKind::GroundTruth,
            schedule: StageSchedule::Joint,
            pretrain_epochs: 0,
            decay_unit: DecayUnit::Epochs,
            mask_blur_prob: 0.5,
            mask_blur_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for 128x128 phantoms.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 30,
            base_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(TrainError::BadConfig("base_lr must be positive".into()));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(TrainError::BadConfig(
                "lr_decay_epochs must be strictly increasing".into(),
            ));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(TrainError::BadConfig(
                "lr_decay_factor must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.augmentation.flip_prob) {
            return Err(TrainError::BadConfig("flip_prob outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_blur_prob) {
            return Err(TrainError::BadConfig(
                "mask_blur_prob outside [0, 1]".into(),
            ));
        }
        self.loss_weights
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::BadConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::BundleIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_toml_string()).map_err(|source| TrainError::BundleIo {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Step-decay learning rate: the base rate times `factor^k`, where `k`
/// counts decay boundaries at or before `epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = config
        .lr_decay_epochs
        .iter()
        .filter(|&&boundary| boundary <= epoch)
        .count();
    config.base_lr * config.lr_decay_factor.powi(decays as i32)
}

/// One completed epoch. Wall time is informational and excluded from
/// determinism comparisons and the CSV rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_multilayers: Option<f64>,
    pub loss_choroid: Option<f64>,
    pub loss_bio: Option<f64>,
    pub loss_total: f64,
    pub val: Option<MetricsReport>,
    pub val_thickness_mae: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(stage: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            records: Vec::new(),
        }
    }

    pub fn final_val(&self) -> Option<&MetricsReport> {
        self.records.iter().rev().find_map(|r| r.val.as_ref())
    }

    pub fn final_thickness_mae(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_thickness_mae)
    }

    /// Numeric equality ignoring wall-clock fields.
    pub fn same_numbers(&self, other: &TrainLog) -> bool {
        self.stage == other.stage
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(other.records.iter())
                .all(|(a, b)| {
                    a.epoch == b.epoch
                        && a.lr == b.lr
                        && a.loss_multilayers == b.loss_multilayers
                        && a.loss_choroid == b.loss_choroid
                        && a.loss_bio == b.loss_bio
                        && a.loss_total == b.loss_total
                        && a.val == b.val
                        && a.val_thickness_mae == b.val_thickness_mae
                })
    }

    /// Per-epoch rows without wall time, suitable for byte-level
    /// determinism comparison.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "epoch,lr,loss_multilayers,loss_choroid,loss_bio,loss_total,val_dice,val_iou,val_ausde_mean,val_acc,val_sen,val_thickness_mae\n",
        );
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
        for r in &self.records {
            let (dice, iou, ausde, acc, sen) = match &r.val {
                Some(m) => (
                    opt(Some(m.dice)),
                    opt(Some(m.iou)),
                    opt(m.ausde_mean),
                    opt(Some(m.accuracy)),
                    opt(Some(m.sensitivity)),
                ),
                None => Default::default(),
            };
            out.push_str(&format!(
                "{},{:.17e},{},{},{},{:.17e},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                opt(r.loss_multilayers),
                opt(r.loss_choroid),
                opt(r.loss_bio),
                r.loss_total,
                dice,
                iou,
                ausde,
                acc,
                sen,
                opt(r.val_thickness_mae),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| TrainError::BundleIo {
            path: path.to_path_buf(),
            source,
        })
    }

    /// JSON summary including wall-clock times.
    pub fn write_summary_json(&self, path: &Path) -> Result<(), TrainError> {
        let total_wall: f64 = self.records.iter().map(|r| r.wall_secs).sum();
        let summary = serde_json::json!({
            "stage": self.stage,
            "epochs": self.records.len(),
            "total_wall_secs": total_wall,
            "final_val": self.final_val(),
            "final_thickness_mae": self.final_thickness_mae(),
            "records": self.records,
        });
        std::fs::write(
            path,
            serde_json::to_string_pretty(&summary).expect("serializes"),
        )
        .map_err(|source| TrainError::BundleIo {
            path: path.to_path_buf(),
            source,
        })
    }
}
