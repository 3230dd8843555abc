use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of the two training stages. Serialised as flat `key = value` TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Only `"sgd"` is supported.
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    /// Epoch (0-based) at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    /// Teacher retention factor of the moving average.
    pub ema_decay: f64,
    /// Steps between moving-average updates.
    pub ema_period: usize,
    pub tau_u: f64,
    pub tau_l: f64,
    /// Treat images with no detection above `tau_l` as background targets.
    pub background_pseudo_labels: bool,
    pub unlabeled_ratio: f64,
    pub mask_block: usize,
    pub mask_ratio: f64,
    pub lambda_m: f64,
    pub lambda_a_ins: f64,
    pub lambda_a_img: f64,
    pub lambda_c_ins: f64,
    pub lambda_c_img: f64,
    /// Gradient-reversal coefficient of the domain discriminators.
    pub da_rate: f64,
    pub seed: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Caps the steps of one epoch; 0 means a full pass over the data.
    pub max_steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: "sgd".into(),
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.02,
            batch_size: 16,
            epochs: 10,
            warmup_epochs: 0.333,
            lr_decay_epoch: 8,
            lr_decay_factor: 0.1,
            ema_decay: 0.9,
            ema_period: 1,
            tau_u: 0.8,
            tau_l: 0.05,
            background_pseudo_labels: true,
            unlabeled_ratio: 0.8,
            mask_block: 32,
            mask_ratio: 0.5,
            lambda_m: 0.5,
            lambda_a_ins: 1e-1,
            lambda_a_img: 2.5e-2,
            lambda_c_ins: 1e-2,
            lambda_c_img: 2.5e-3,
            da_rate: 2.5e-3,
            seed: 0,
            grad_clip: 0.0,
            max_steps_per_epoch: 0,
        }
    }
}

/// The five weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub m: f64,
    pub a_ins: f64,
    pub a_img: f64,
    pub c_ins: f64,
    pub c_img: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        TrainConfig::default().weights()
    }
}

impl TrainConfig {
    /// Settings for 64×64 synthetic scenes on a CPU: small batches, an 8-pixel
    /// mask grid and short epochs.
    pub fn toy() -> Self {
        TrainConfig {
            base_lr: 0.01,
            batch_size: 8,
            epochs: 6,
            lr_decay_epoch: 5,
            mask_block: 8,
            grad_clip: 10.0,
            ..Default::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            m: self.lambda_m,
            a_ins: self.lambda_a_ins,
            a_img: self.lambda_a_img,
            c_ins: self.lambda_c_ins,
            c_img: self.lambda_c_img,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.optimizer != "sgd" {
            return bad(format!("unsupported optimizer {:?}", self.optimizer));
        }
        if !(0.0 <= self.tau_l && self.tau_l < self.tau_u && self.tau_u <= 1.0) {
            return bad(format!(
                "need 0 ≤ tau_l < tau_u ≤ 1, got {} / {}",
                self.tau_l, self.tau_u
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            ));
        }
        if !(self.unlabeled_ratio > 0.0 && self.unlabeled_ratio < 1.0) {
            return bad(format!(
                "unlabeled_ratio must lie in (0, 1), got {}",
                self.unlabeled_ratio
            ));
        }
        let w = self.weights();
        if [
            w.m,
            w.a_ins,
            w.a_img,
            w.c_ins,
            w.c_img,
            self.da_rate,
            self.weight_decay,
            self.grad_clip,
        ]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad(
                "loss weights, da_rate, weight_decay and grad_clip must be finite and ≥ 0".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.momentum) {
            return bad("ema_decay must lie in [0, 1] and momentum in [0, 1)".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.warmup_epochs >= 0.0) {
            return bad("base_lr must be positive and warmup_epochs non-negative".into());
        }
        if self.batch_size < 2 || self.epochs == 0 || self.mask_block == 0 || self.ema_period == 0 {
            return bad(
                "batch_size ≥ 2 and positive epochs, mask_block and ema_period are required".into(),
            );
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_table() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.momentum, c.weight_decay, c.da_rate, c.warmup_epochs),
            (0.9, 1e-4, 2.5e-3, 0.333)
        );
        assert_eq!(
            (c.epochs, c.ema_decay, c.tau_u, c.tau_l),
            (10, 0.9, 0.8, 0.05)
        );
        let w = c.weights();
        assert_eq!(
            (w.m, w.a_ins, w.a_img, w.c_ins, w.c_img),
            (0.5, 1e-1, 2.5e-2, 1e-2, 2.5e-3)
        );
        assert_eq!((c.mask_block, c.mask_ratio, c.batch_size), (32, 0.5, 16));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::toy();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let p = TrainConfig::from_toml_str("weight_decay = 0.0005\nseed = 3\n").unwrap();
        assert_eq!((p.weight_decay, p.seed, p.base_lr), (0.0005, 3, 0.02));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(TrainConfig::from_toml_str("tau_l = 0.9").is_err());
        assert!(TrainConfig::from_toml_str("mask_ratio = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(TrainConfig::from_toml_str("lambda_m = -1.0").is_err());
        assert!(TrainConfig::from_toml_str("optimizer = \"adam\"").is_err());
    }
}
