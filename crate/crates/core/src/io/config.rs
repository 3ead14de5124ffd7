//! Run configuration file: one flat JSON document mirroring the model and
//! training hyperparameters in snake_case. Unknown keys are rejected;
//! missing keys take the documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Architecture.
    pub base_channels: usize,
    pub depth: usize,
    pub ssm_state: usize,
    pub image_size: usize,
    pub gelu_kind: String,
    pub use_qseme: bool,
    pub use_msdam: bool,
    pub use_ffrm: bool,
    pub seed: u64,
    // Optimization.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub dice_eps: f64,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            base_channels: m.base_channels,
            depth: m.depth,
            ssm_state: m.ssm_state,
            image_size: m.image_size,
            gelu_kind: m.gelu_kind,
            use_qseme: m.use_qseme,
            use_msdam: m.use_msdam,
            use_ffrm: m.use_ffrm,
            seed: m.seed,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch: t.batch,
            epochs: t.epochs,
            patience: t.patience,
            betas: t.betas,
            eps: t.eps,
            dice_eps: t.dice_eps,
            threshold: t.threshold,
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            ssm_state: self.ssm_state,
            image_size: self.image_size,
            gelu_kind: self.gelu_kind.clone(),
            use_qseme: self.use_qseme,
            use_msdam: self.use_msdam,
            use_ffrm: self.use_ffrm,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch: self.batch,
            epochs: self.epochs,
            patience: self.patience,
            betas: self.betas,
            eps: self.eps,
            dice_eps: self.dice_eps,
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()
    }
}

pub fn parse_config(s: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(s).map_err(|e| Error::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let s = std::fs::read_to_string(path)?;
    parse_config(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_takes_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.base_channels, 32);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.batch, 2);
        assert_eq!(cfg.betas, (0.9, 0.999));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn partial_overrides_apply() {
        let cfg = parse_config(r#"{"base_channels": 16, "image_size": 64, "epochs": 5}"#).unwrap();
        assert_eq!(cfg.base_channels, 16);
        assert_eq!(cfg.image_size, 64);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.depth, 3);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(parse_config(r#"{"image_size": 100}"#).is_err());
        assert!(parse_config(r#"{"threshold": 1.5}"#).is_err());
        assert!(parse_config(r#"{"gelu_kind": "erf"}"#).is_err());
    }
}
