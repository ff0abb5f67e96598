//! Experiment configuration: a single JSON document with a canonical hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossbar::CrossbarConfig;
use crate::error::{HatError, Result};
use crate::experiment::dataset::DatasetKind;
use crate::hat::{Activation, TrainConfig};
use crate::perturb::{validate_pipeline, PerturbationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![2, 32, 2],
            activations: vec![Activation::Relu, Activation::Identity],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Rings,
            n: 4000,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Name of the perturbation field to vary (e.g. "sigma_r", "rho").
    pub axis: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Perturbation draws per evaluation; mean and std are reported.
    pub n_noise_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_noise_samples: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Monte-Carlo draws for consistency and variance.
    pub k: usize,
    /// Clean pre-training steps before measuring (0 = diagnose at init).
    pub pretrain_clean_steps: usize,
    /// Probe batch size (taken from the head of the train split).
    pub batch: usize,
    /// Multiplier on the distortion-matched additive reference variance.
    pub t_var_multiplier: f64,
    pub t_sens: f64,
    pub t_frozen: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            k: 256,
            pretrain_clean_steps: 0,
            batch: 128,
            t_var_multiplier: 100.0,
            t_sens: 0.01,
            t_frozen: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub crossbar: CrossbarConfig,
    /// Perturbations injected during training (same pipeline per layer).
    pub train_perturbations: Vec<PerturbationSpec>,
    /// Perturbations applied at evaluation; independently settable so
    /// clean-training + perturbed-inference protocols are expressible.
    pub eval_perturbations: Vec<PerturbationSpec>,
    pub dataset: DatasetConfig,
    pub sweep: Option<SweepConfig>,
    pub eval: EvalConfig,
    pub diagnose: DiagnoseConfig,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.layer_sizes.len() < 2 {
            return Err(HatError::InvalidConfig(
                "model.layer_sizes needs at least input and output".into(),
            ));
        }
        if self.model.activations.len() != self.model.layer_sizes.len() - 1 {
            return Err(HatError::InvalidConfig(format!(
                "expected {} activations, got {}",
                self.model.layer_sizes.len() - 1,
                self.model.activations.len()
            )));
        }
        self.train.validate()?;
        self.crossbar.validate()?;
        validate_pipeline(&self.train_perturbations)?;
        validate_pipeline(&self.eval_perturbations)?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HatError::InvalidConfig("sweep.values is empty".into()));
            }
            // The axis must resolve against at least one spec.
            let mut probe = self.clone();
            probe.apply_axis(&sweep.axis, sweep.values[0])?;
        }
        if self.eval.n_noise_samples < 1 {
            return Err(HatError::InvalidConfig(
                "eval.n_noise_samples must be >= 1".into(),
            ));
        }
        if self.diagnose.k < 2 {
            return Err(HatError::InvalidConfig("diagnose.k must be >= 2".into()));
        }
        Ok(())
    }

    /// Set a sweep-axis value on every spec (train and eval) that carries
    /// the field; unknown axes are an error.
    pub fn apply_axis(&mut self, axis: &str, value: f64) -> Result<()> {
        let mut hit = false;
        for spec in self
            .train_perturbations
            .iter_mut()
            .chain(self.eval_perturbations.iter_mut())
        {
            hit |= spec.set_axis(axis, value);
        }
        if !hit {
            return Err(HatError::UnknownSweepAxis(axis.into()));
        }
        validate_pipeline(&self.train_perturbations)?;
        validate_pipeline(&self.eval_perturbations)?;
        Ok(())
    }
}

/// Canonical 256-bit config digest: SHA-256 over the sorted-key JSON
/// serialization, hex-encoded.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let value = serde_json::to_value(cfg).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"master_seed": 1, "bogus_field": true}"#;
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn hash_stable_and_semantic() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = ExperimentConfig {
            master_seed: 99,
            ..ExperimentConfig::default()
        };
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn axis_resolution() {
        let mut cfg = ExperimentConfig {
            eval_perturbations: vec![PerturbationSpec::Additive { sigma_r: 0.0 }],
            ..ExperimentConfig::default()
        };
        cfg.apply_axis("sigma_r", 1e-6).unwrap();
        assert_eq!(
            cfg.eval_perturbations[0],
            PerturbationSpec::Additive { sigma_r: 1e-6 }
        );
        assert!(matches!(
            cfg.apply_axis("rho", 0.1),
            Err(HatError::UnknownSweepAxis(_))
        ));
    }

    #[test]
    fn sweep_axis_validated_at_load_time() {
        let cfg = ExperimentConfig {
            sweep: Some(SweepConfig {
                axis: "no_such_field".into(),
                values: vec![0.1],
            }),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
