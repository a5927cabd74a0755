//! One TOML file configures a whole run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::segnet::NetConfig;
use crate::train::{FinetuneConfig, StaticTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub meta_val_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            meta_val_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DatasetConfig,
    pub split: SplitConfig,
    pub net: NetConfig,
    pub pretrain: StaticTrainConfig,
    pub search: SearchConfig,
    pub finetune: FinetuneConfig,
    /// How many searched cells go on to fine-tuning.
    pub top_k: usize,
    /// Moving-average window of the reward report.
    pub report_window: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetConfig::default(),
            split: SplitConfig::default(),
            net: NetConfig::default(),
            pretrain: StaticTrainConfig::default(),
            search: SearchConfig::default(),
            finetune: FinetuneConfig::default(),
            top_k: 2,
            report_window: 8,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    /// Missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.search.validate()?;
        if self.net.classes != self.data.classes {
            return Err(Error::Config(format!(
                "network has {} classes but the data has {}",
                self.net.classes, self.data.classes
            )));
        }
        if self.data.height % 32 != 0 || self.data.width % 32 != 0 {
            return Err(Error::Config("frame sides must be divisible by 32".into()));
        }
        if self.data.seq_len < 2 {
            return Err(Error::Config("sequences need at least two frames".into()));
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if self.top_k == 0 || self.report_window == 0 {
            return Err(Error::Config("top_k and report_window must be positive".into()));
        }
        Ok(())
    }
}
