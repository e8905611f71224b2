//! Run configuration: one JSON document covering model shape, training
//! schedule, data generation, and loss weights. Every field has a default so
//! partial configs stay valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::synthvid::SceneSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// token dimension; must be divisible by 4 (positional encoding) and by
    /// `heads`
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub tfam_layers: usize,
    pub stam_layers: usize,
    pub qam_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_context: usize,
    /// temporal half-window for context sampling
    pub window: usize,
    pub num_classes: usize,
    // ablation switches
    pub enable_tfam: bool,
    pub enable_stam: bool,
    pub enable_qam: bool,
    /// gated correlation in STAM / recursive update (plain residual when off)
    pub gated: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            model_dim: 72,
            heads: 6,
            encoder_layers: 2,
            tfam_layers: 2,
            stam_layers: 2,
            qam_layers: 2,
            decoder_layers: 2,
            num_queries: 100,
            num_context: 2,
            window: 12,
            num_classes: 3,
            enable_tfam: true,
            enable_stam: true,
            enable_qam: true,
            gated: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 {
            return Err(Error::Config("model_dim and heads must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by 4 for the positional encoding",
                self.model_dim
            )));
        }
        if self.num_queries == 0 || self.num_classes == 0 {
            return Err(Error::Config("num_queries and num_classes must be positive".into()));
        }
        // num_context = 0 is the single-frame baseline
        if self.num_context > 0 && self.window < self.num_context {
            return Err(Error::Config(format!(
                "window {} too small for num_context {}",
                self.window, self.num_context
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// optimizer steps per epoch
    pub steps_per_epoch: usize,
    /// training items accumulated into each optimizer step
    pub batch_size: usize,
    /// optimizer steps over which the learning rate ramps up linearly
    pub warmup_steps: usize,
    pub lr: f64,
    /// lr multiplier applied at the drop epoch
    pub lr_drop_factor: f64,
    /// fraction of total epochs after which the drop happens
    pub lr_drop_at: f64,
    /// evaluate mAP every N epochs in the training log (0 = final epoch only)
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 4,
            warmup_steps: 100,
            lr: 1e-4,
            lr_drop_factor: 0.1,
            lr_drop_at: 0.8,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// epoch index at which the learning rate drops
    pub fn drop_epoch(&self) -> usize {
        ((self.epochs as f64 * self.lr_drop_at).floor() as usize).min(self.epochs)
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    /// Epoch schedule plus a linear warmup over the first `warmup_steps`
    /// optimizer steps.
    pub fn lr_for_step(&self, epoch: usize, step: usize) -> f64 {
        let base = self.lr_for_epoch(epoch);
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_sequences: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            num_sequences: 8,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env_overrides();
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config encode: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// `PTSE_SEED` overrides both the training and data-generation seeds.
    pub fn apply_env_overrides(&mut self) {
        if let Ok(s) = std::env::var("PTSE_SEED") {
            if let Ok(seed) = s.trim().parse::<u64>() {
                self.train.seed = seed;
                self.data.scene.seed = seed;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_paper_shaped() {
        let cfg = RunConfig::default();
        cfg.model.validate().unwrap();
        assert_eq!(cfg.model.heads, 6);
        assert_eq!(cfg.model.num_queries, 100);
        assert_eq!(cfg.model.num_context, 2);
        assert_eq!(cfg.model.window, 12);
        assert_eq!(cfg.model.encoder_layers, 2);
        assert_eq!(cfg.model.decoder_layers, 2);
        assert!((cfg.train.lr - 1e-4).abs() < 1e-18);
        assert!((cfg.train.lr_drop_factor - 0.1).abs() < 1e-12);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"model": {"model_dim": 24, "heads": 4}}"#).unwrap();
        assert_eq!(cfg.model.model_dim, 24);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.model.num_queries, 100);
        assert_eq!(cfg.train.epochs, 10);
    }

    #[test]
    fn validation_catches_bad_dims() {
        let mut cfg = RunConfig::default();
        cfg.model.model_dim = 64; // not divisible by 6 heads
        assert!(cfg.model.validate().is_err());
        cfg.model.model_dim = 66; // divisible by 6, not by 4
        assert!(cfg.model.validate().is_err());
        cfg.model.model_dim = 72;
        assert!(cfg.model.validate().is_ok());
    }

    #[test]
    fn lr_schedule_drops_at_eighty_percent() {
        let t = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        assert_eq!(t.drop_epoch(), 8);
        assert!((t.lr_for_epoch(7) - 1e-4).abs() < 1e-18);
        assert!((t.lr_for_epoch(8) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        let cfg = RunConfig::default();
        cfg.save(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(back.model.model_dim, cfg.model.model_dim);
        assert_eq!(back.data.num_sequences, cfg.data.num_sequences);
    }
}
