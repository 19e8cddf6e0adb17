//! Training configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::tensor::Dtype;

/// Contrastive pretraining of the CLIP branch before QA training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for ClipPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Lower bound of the linearly decayed learning rate.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub clip_frozen: bool,
    pub precision: Dtype,
    /// Dataset directory, recorded so checkpoints can be evaluated later.
    pub data_dir: Option<PathBuf>,
    /// Seeds used by the ablation runner.
    pub ablation_seeds: Vec<u64>,
    pub model: ModelConfig,
    pub clip_pretrain: ClipPretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            lr_floor: 0.0,
            weight_decay: 1e-3,
            batch_size: 24,
            epochs: 15,
            seed: 0,
            mode: Mode::Full,
            clip_frozen: true,
            precision: Dtype::F32,
            data_dir: None,
            ablation_seeds: vec![0, 1, 2],
            model: ModelConfig::default(),
            clip_pretrain: ClipPretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.weight_decay < 0.0 || self.lr_floor < 0.0 {
            return Err(Error::config("weight_decay and lr_floor must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let d = TrainConfig::default();
        assert_eq!((d.learning_rate, d.weight_decay, d.batch_size), (5e-5, 1e-3, 24));
        let c = TrainConfig::from_toml(
            "learning_rate = 1e-3\nmode = \"no_clip\"\nprecision = \"f64\"\n[model]\ndim = 16\n",
        )
        .unwrap();
        assert_eq!(c.mode, Mode::NoClip);
        assert_eq!(c.precision, Dtype::F64);
        assert_eq!(c.model.dim, 16);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.batch_size, 24);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
        assert!(TrainConfig::from_toml("mode = \"bogus\"").is_err());
        assert!(TrainConfig::from_toml("typo_field = 1").is_err());
    }
}
