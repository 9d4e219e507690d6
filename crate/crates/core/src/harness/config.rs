use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::labelgen::LabelConfig;
use crate::losses::LossConfig;
use crate::network::ModelConfig;
use crate::synthdata::AugmentConfig;

/// Set to `1` to force single-worker data loading and evaluation.
pub const DETERMINISTIC_ENV: &str = "ANCHORSPOT_DETERMINISTIC";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Sampling supervision on.
    #[default]
    Pretrain,
    /// Sampling supervision off; usually starts from a pretrained checkpoint.
    Finetune,
}

impl Stage {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Stage::Pretrain => 2e-3,
            Stage::Finetune => 1e-3,
        }
    }
}

/// One training dataset and its share of each batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default = "unit_ratio")]
    pub ratio: f64,
}

fn unit_ratio() -> f64 {
    1.0
}

/// Everything a training run needs; read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Defaults to the stage's rate when absent.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Running-statistics update rate of batch norm.
    pub bn_momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Weak-instance labelling; levels and K come from `model`.
    pub weak_radius: f64,
    /// `None` feeds images unchanged (they must share one size).
    pub augment: Option<AugmentConfig>,
    pub datasets: Vec<DataSource>,
    /// Evaluate on `eval_dataset` every this many steps; 0 disables.
    pub eval_interval: usize,
    pub eval_dataset: Option<PathBuf>,
    pub inference: InferenceConfig,
    /// Save every this many steps (and at the end); 0 saves only at the end.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Start from these weights with fresh momentum and step 0.
    pub init_from: Option<PathBuf>,
    /// Continue this run exactly: weights, momentum and step.
    pub resume: Option<PathBuf>,
    pub log_interval: usize,
    /// Parallel data-loading threads; forced to 1 in deterministic mode.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 1000,
            batch_size: 8,
            learning_rate: None,
            weight_decay: 1e-4,
            momentum: 0.9,
            poly_power: 0.9,
            bn_momentum: 0.1,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            weak_radius: LabelConfig::default().weak_radius,
            augment: Some(AugmentConfig {
                crop_size: ModelConfig::default().image_size,
                ..AugmentConfig::default()
            }),
            datasets: Vec::new(),
            eval_interval: 0,
            eval_dataset: None,
            inference: InferenceConfig::default(),
            checkpoint_interval: 0,
            checkpoint_dir: None,
            init_from: None,
            resume: None,
            log_interval: 10,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Parses and validates a config. An unset `augment.crop_size` follows
    /// `model.image_size`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        let raw: toml::Table = toml::from_str(text)?;
        let crop_set = raw
            .get("augment")
            .and_then(|a| a.as_table())
            .is_some_and(|a| a.contains_key("crop_size"));
        if let (Some(a), false) = (cfg.augment.as_mut(), crop_set) {
            a.crop_size = cfg.model.image_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.stage.default_learning_rate())
    }

    /// Loss settings with sampling supervision tied to the stage.
    pub fn stage_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        loss.weights.sampling_supervision_enabled = self.stage == Stage::Pretrain;
        loss
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            levels: self.model.levels.clone(),
            num_points: self.model.num_points,
            weak_radius: self.weak_radius,
            ..LabelConfig::default()
        }
    }

    pub fn effective_workers(&self) -> usize {
        if deterministic_mode() {
            1
        } else {
            self.workers.max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config("momentum in [0, 1), weight decay and poly power nonnegative".into()));
        }
        if let Some(a) = &self.augment {
            if !(a.scale.0 > 0.0 && a.scale.1 >= a.scale.0) {
                return Err(Error::Config(format!("augment scale range {:?} must be positive", a.scale)));
            }
            if a.crop_size % ModelConfig::MAX_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "crop_size {} is not a multiple of {}",
                    a.crop_size,
                    ModelConfig::MAX_STRIDE
                )));
            }
        }
        if self.datasets.iter().any(|d| !(d.ratio.is_finite() && d.ratio >= 0.0)) {
            return Err(Error::Config("dataset ratios must be nonnegative".into()));
        }
        self.loss.weights.validate()?;
        self.model.validate()
    }
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

/// `base * (1 - step / total)^power`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64 / total as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 2e-3, 0.9), 2e-3);
        assert_eq!(poly_lr(100, 100, 2e-3, 0.9), 0.0);
        assert!((poly_lr(50, 100, 1.0, 0.9) - 0.5359).abs() < 1e-4);
        let lrs: Vec<f64> = (0..=100).map(|s| poly_lr(s, 100, 1.0, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stage_defaults_and_toml() {
        let cfg = TrainConfig::from_toml("stage = \"finetune\"\nsteps = 5\n[[datasets]]\npath = \"d\"\n").unwrap();
        assert_eq!(cfg.learning_rate(), 1e-3);
        assert!(!cfg.stage_loss().weights.sampling_supervision_enabled);
        assert_eq!(cfg.datasets[0].ratio, 1.0);
        assert_eq!(TrainConfig::default().learning_rate(), 2e-3);
        assert!(TrainConfig::default().stage_loss().weights.sampling_supervision_enabled);
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_toml("steps = 0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let small = TrainConfig::from_toml("[model]\nimage_size = 128\n").unwrap();
        assert_eq!(small.augment.unwrap().crop_size, 128);
        let explicit = TrainConfig::from_toml("[model]\nimage_size = 128\n[augment]\ncrop_size = 256\n").unwrap();
        assert_eq!(explicit.augment.unwrap().crop_size, 256);
    }
}
