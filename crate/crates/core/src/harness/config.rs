//! The lab config file: one JSON document with `model`, `conversion`, `gate`,
//! `train`, `precision` and `telemetry` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamWConfig, Schedule};
use super::tasks::TaskParams;
use crate::convert::ConversionConfig;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::precision::PrecisionPolicy;
use crate::routing::GateConfig;
use crate::telemetry::TelemetryConfig;

/// Environment variable that overrides the base directory for run outputs.
pub const LOG_DIR_ENV: &str = "MOELAB_LOG_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub inner_dim: usize,
    pub layers: usize,
    /// Seed of the randomly initialized dense base model.
    pub dense_seed: u64,
    /// Steps of dense training on the task mixture before conversion, so the
    /// cloned experts start out useful. 0 converts the random model as is.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            hidden_dim: d.hidden_dim,
            inner_dim: d.inner_dim,
            layers: d.layers,
            dense_seed: 0,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            hidden_dim: self.hidden_dim,
            inner_dim: self.inner_dim,
            layers: self.layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrder {
    /// Seeded uniform choice over the nine tasks each step.
    #[default]
    Random,
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    /// Schedule horizon.
    pub total_steps: usize,
    /// Steps actually run; `None` runs the whole schedule.
    pub steps: Option<usize>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub tokens_per_step: usize,
    /// Sequences the step's tokens are split into (matters for the
    /// per-sequence aux loss and the attention gate).
    pub sequences_per_step: usize,
    pub task_order: TaskOrder,
    pub tasks: TaskParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 500,
            total_steps: 2000,
            steps: None,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            tokens_per_step: 512,
            sequences_per_step: 1,
            task_order: TaskOrder::Random,
            tasks: TaskParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_to_run(&self) -> usize {
        self.steps.unwrap_or(self.total_steps)
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.steps_to_run() > self.total_steps {
            return Err(Error::Config("steps exceed the schedule horizon".into()));
        }
        if self.tokens_per_step == 0
            || self.sequences_per_step == 0
            || !self.tokens_per_step.is_multiple_of(self.sequences_per_step)
        {
            return Err(Error::Config(
                "tokens_per_step must be a positive multiple of sequences_per_step".into(),
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.eps > 0.0) {
            return Err(Error::Config(
                "betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub conversion: ConversionConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub precision: PrecisionPolicy,
    pub telemetry: TelemetryConfig,
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.hidden_dim == 0 || self.model.inner_dim == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if !(self.model.pretrain_lr > 0.0 && self.model.pretrain_lr.is_finite()) {
            return Err(Error::Config("pretrain_lr must be positive".into()));
        }
        self.conversion_config().validate()?;
        self.train.validate()?;
        self.telemetry.validate()
    }

    /// Conversion settings with the `gate` section merged in.
    pub fn conversion_config(&self) -> ConversionConfig {
        ConversionConfig {
            gate: self.gate.clone(),
            ..self.conversion.clone()
        }
    }

    /// Hex SHA-256 of the config with the training seed cleared, so runs of
    /// one configuration share a prefix.
    pub fn config_hash(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.train.seed = 0;
        let bytes = serde_json::to_vec(&unseeded).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// `<base>/<hash prefix>-seed<seed>`, with `base` replaced by
    /// `$MOELAB_LOG_DIR` when set.
    pub fn run_dir(&self, base: &Path) -> PathBuf {
        let base = std::env::var_os(LOG_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| base.to_path_buf());
        base.join(format!(
            "{}-seed{}",
            &self.config_hash()[..16],
            self.train.seed
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = LabConfig::from_json("{}").unwrap();
        assert_eq!(c, LabConfig::default());
        assert_eq!(c.model.layers, 6);
        assert_eq!(c.train.tokens_per_step, 512);
    }

    #[test]
    fn every_section_is_addressable() {
        let text = r#"{
            "model": {"hidden_dim": 16, "inner_dim": 32, "layers": 3, "dense_seed": 4},
            "conversion": {"n_routed": 2, "n_shared": 1, "shared_init": {"mode": "train_micro_noise", "sigma": 0.001}, "freeze": "full"},
            "gate": {"kind": "mlp", "top_k": 1, "aux_loss_alpha": 0.2},
            "train": {"lr": 0.001, "warmup_steps": 10, "total_steps": 100, "betas": [0.8, 0.99], "eps": 1e-6, "weight_decay": 0.1, "tokens_per_step": 64, "task_order": "round_robin", "seed": 9},
            "precision": {"master_format": "bf16", "compute_format": "bf16", "lr_multipliers": {"shared": 20.0}},
            "telemetry": {"log_interval": 10, "channel": "mass", "thresholds": {"t_dead": 0.05}}
        }"#;
        let c = LabConfig::from_json(text).unwrap();
        assert_eq!(c.conversion_config().gate.aux_loss_alpha, 0.2);
        assert_eq!(c.train.adam().betas, (0.8, 0.99));
        assert_eq!(c.precision.lr_multipliers.shared, 20.0);
        assert_eq!(c.telemetry.thresholds.t_dead, 0.05);
        assert_eq!(c.telemetry.thresholds.t_skew, 0.30);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(
            LabConfig::from_json(r#"{"train": {"warmup_steps": 600, "total_steps": 500}}"#)
                .is_err()
        );
        assert!(LabConfig::from_json(r#"{"train": {"lr": 0}}"#).is_err());
        assert!(LabConfig::from_json(r#"{"bogus": {}}"#).is_err());
        assert!(LabConfig::from_json(r#"{"conversion": {"routed_scaling": 0.5}}"#).is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = LabConfig::default();
        let mut b = a.clone();
        b.train.seed = 5;
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.lr = 1e-3;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
