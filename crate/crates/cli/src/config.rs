//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; missing keys take the defaults below.
//! Unknown keys are rejected.
//!
//! ```toml
//! [model]
//! num_classes = 3
//! fbsm_variant = "full"        # "full" | "half-identity" | "off"
//!
//! [backbone]
//! stage_channels = [16, 32, 64]
//! stage_depths = [1, 2, 2]
//! mlp_ratio = 2.0
//!
//! [fbsm]
//! regions = 3                  # regions per axis of the stride-32 map
//! topk = 4
//! heads = 1
//! weight_by_routing = false
//!
//! [loss]
//! gamma = 0.5
//! beta = 0.5
//! nwd_constant = 12.8
//!
//! [train]
//! lr = 0.02
//! momentum = 0.9
//! weight_decay = 0.01
//! batch_size = 8
//! epochs = 20
//! seed = 0
//! box_weight = 2.0
//! focal_gamma = 0.0
//! warmup_steps = 30
//! grad_clip = 10.0
//! ema_decay = 0.995          # 0 disables weight averaging
//!
//! [eval]
//! iou_threshold = 0.5
//! exclude_difficult = false
//!
//! [data]
//! train_images = 500
//! val_images = 100
//! train_seed = 1
//! val_seed = 2
//!
//! [data.synth]
//! image_size = 96
//! min_objects = 1
//! max_objects = 6
//! min_size = 8
//! max_size = 32
//! small_max = 16
//! small_fraction = 0.5
//! gap = 2
//!
//! [ablation]
//! # budget per (gamma, beta) row; absent means the [train] / [data] values
//! # epochs = 20
//! # train_images = 500
//!
//! [paths]
//! # dataset_dir = "data"       # holds train/ and val/; synthetic if absent
//! # checkpoint = "out/run.rfwt" # default: <output_dir>/checkpoint.rfwt
//! output_dir = "out"
//! ```

use std::path::{Path, PathBuf};

use rfwnet::boxloss::WcwConfig;
use rfwnet::data::synth::SynthSpec;
use rfwnet::detector::train::TrainConfig;
use rfwnet::detector::{DetectorConfig, FbsmVariant};
use rfwnet::eval::EvalOptions;
use rfwnet::fbsm::FbsmConfig;
use rfwnet::rfas::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_classes: usize,
    pub fbsm_variant: FbsmVariant,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_classes: 3,
            fbsm_variant: FbsmVariant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_threshold: f64,
    pub exclude_difficult: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        EvalSection {
            iou_threshold: o.iou_threshold,
            exclude_difficult: o.exclude_difficult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_images: usize,
    pub val_images: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub synth: SynthSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_images: 500,
            val_images: 100,
            train_seed: 1,
            val_seed: 2,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub epochs: Option<usize>,
    pub train_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset_dir: None,
            checkpoint: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RFWNetConfig {
    pub model: ModelSection,
    pub backbone: BackboneConfig,
    pub fbsm: FbsmConfig,
    pub loss: WcwConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
    pub ablation: AblationSection,
    pub paths: PathsSection,
}

impl RFWNetConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RFWNetConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.detector().validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.data.train_images == 0 || self.data.val_images == 0 {
            return Err(CliError::Validation(
                "data.train_images and data.val_images must be positive".into(),
            ));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(CliError::Validation(format!(
                "eval.iou_threshold must lie in (0, 1], got {}",
                self.eval.iou_threshold
            )));
        }
        if self.ablation.epochs == Some(0) || self.ablation.train_images == Some(0) {
            return Err(CliError::Validation(
                "ablation budget must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            num_classes: self.model.num_classes,
            backbone: self.backbone.clone(),
            fbsm: self.fbsm.clone(),
            fbsm_variant: self.model.fbsm_variant,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("checkpoint.rfwt"))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            iou_threshold: self.eval.iou_threshold,
            exclude_difficult: self.eval.exclude_difficult,
        }
    }
}
