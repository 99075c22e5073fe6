//! One JSON document configuring data, model, losses, training and
//! evaluation. Every section and field is optional and falls back to its
//! default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::error::{Error, Result};
use crate::fusion::FusionBlockConfig;
use crate::losses::{ContrastiveConfig, FuseLossConfig};
use crate::metrics::EvalConfig;
use crate::model::BackboneConfig;
use crate::synth::{AugmentConfig, ConditionMix, CorruptionConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split_seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub mix: ConditionMix,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split_seed: 7,
            train_size: 512,
            val_size: 32,
            test_size: 64,
            mix: ConditionMix::uniform(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::with_epochs(40)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub corruption: CorruptionConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionBlockConfig,
    pub contrastive: ContrastiveConfig,
    pub fuse_loss: FuseLossConfig,
    pub align: StageConfig,
    pub fuse: StageConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            corruption: CorruptionConfig::default(),
            augment: AugmentConfig::default(),
            backbone: BackboneConfig::default(),
            fusion: FusionBlockConfig::default(),
            contrastive: ContrastiveConfig::default(),
            fuse_loss: FuseLossConfig::default(),
            align: StageConfig::with_epochs(40),
            fuse: StageConfig::with_epochs(20),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.mix.counts(self.data.train_size)?;
        if self.data.val_size == 0 || self.data.test_size == 0 {
            return Err(Error::Config("val_size and test_size must be positive".into()));
        }
        self.augment.validate()?;
        self.backbone.validate()?;
        self.fusion.validate(self.backbone.bottleneck_channels)?;
        self.contrastive.validate()?;
        self.fuse_loss.validate()?;
        self.align.validate()?;
        self.fuse.validate()?;
        self.eval.validate()
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Align => &self.align,
            Stage::Fuse => &self.fuse,
        }
    }
}
