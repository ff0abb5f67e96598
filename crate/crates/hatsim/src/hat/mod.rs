//! Hardware-aware training engine: per-step effective-weight construction,
//! perturbed forward pass, range regularization, and training/evaluation
//! loops over small dense networks.

pub mod pipeline;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Parameter};
use crate::crossbar::{program_weights, CrossbarConfig, ProgrammedPair};
use crate::error::{HatError, Result};
use crate::perturb::conductance::{sample_stuck_mask, StuckMask};
use crate::perturb::{validate_pipeline, PerturbationSpec, StuckPolicy};
use crate::rng::RngStream;
use crate::tensor::TensorValue;

pub use pipeline::{forward, ForwardOut, ForwardStreams, PipelineMode};
pub use train::{
    evaluate, hat_train_step, range_regularization_node, range_regularization_value, EvalReport,
    StepRecord, Trainer,
};

/// Training hyperparameters. Defaults follow the reference training table;
/// desk-scale runs override `steps`/`batch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, train for exactly this many optimizer steps instead of
    /// `epochs` full passes.
    pub steps: Option<usize>,
    pub cosine_schedule: bool,
    pub lambda_reg: f64,
    /// Threshold ratio of the range-regularization hinge, in (0, 1).
    pub beta_reg: f64,
    /// Horizon for drift specs in `fixed` time mode: t ~ U(0, horizon).
    pub drift_horizon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            steps: None,
            cosine_schedule: true,
            lambda_reg: 0.0,
            beta_reg: 0.9,
            drift_horizon: 1000.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta_reg && self.beta_reg < 1.0) {
            return Err(HatError::InvalidConfig(format!(
                "beta_reg must be in (0, 1), got {}",
                self.beta_reg
            )));
        }
        if self.lambda_reg < 0.0 {
            return Err(HatError::InvalidConfig(format!(
                "lambda_reg must be >= 0, got {}",
                self.lambda_reg
            )));
        }
        if self.batch_size == 0 {
            return Err(HatError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    /// Mean over entries of ½(pred − target)²; used by regression-style
    /// probes and the diagnostics oracles.
    SquaredError,
}

/// Step counter shared by the trainer and the drift law.
#[derive(Debug, Clone, Copy)]
pub struct TimeState {
    /// Optimizer-step counter; incremented once per step in accumulated mode.
    pub step: usize,
    /// Horizon for `fixed` drift time sampling.
    pub fixed_horizon: f64,
}

impl TimeState {
    pub fn new(fixed_horizon: f64) -> Self {
        Self {
            step: 0,
            fixed_horizon,
        }
    }
}

/// One dense layer mapped onto a crossbar.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub crossbar: CrossbarConfig,
    /// Training-time perturbation pipeline, in physical order.
    pub perturbations: Vec<PerturbationSpec>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// A dense network whose weight matrices live on simulated crossbars.
/// Biases stay digital and bypass the conductance pipeline.
#[derive(Debug, Clone)]
pub struct HatModel {
    pub layers: Vec<LinearLayer>,
    pub params: ParamStore,
    pub loss: LossKind,
    /// Experiment-scoped stream from which stuck realizations are derived;
    /// the same stream (and hence the same device failures) is shared by
    /// compensated and uncompensated twins of one experiment.
    stuck_stream: RngStream,
    /// Conductances of the initial programming event, used by the
    /// hold-programmed stuck policy.
    initial_programming: Vec<ProgrammedPair>,
}

impl HatModel {
    /// Build an MLP with one perturbation list shared by every layer.
    ///
    /// Weights init N(0, 1/√fan_in) from `stream/init`, biases zero. Stuck
    /// realizations derive from `stream/stuck`; coordinates frozen by a
    /// training-time stuck spec get freeze masks so they never move.
    pub fn mlp(
        sizes: &[usize],
        activations: &[Activation],
        crossbar: &CrossbarConfig,
        perturbations: &[PerturbationSpec],
        loss: LossKind,
        stream: &RngStream,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(HatError::InvalidConfig(
                "need at least input and output sizes".into(),
            ));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(HatError::InvalidConfig(format!(
                "expected {} activations, got {}",
                sizes.len() - 1,
                activations.len()
            )));
        }
        crossbar.validate()?;
        validate_pipeline(perturbations)?;

        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let std = 1.0 / (n_in as f64).sqrt();
            let mut rng = stream.child(&format!("init/layer{l}/w")).rng();
            use rand_distr::{Distribution, StandardNormal};
            let w_val = TensorValue::from_fn(&[n_out, n_in], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            });
            let w = params.add(Parameter::new(w_val));
            let b = params.add(Parameter::new(TensorValue::zeros(&[n_out])));
            layers.push(LinearLayer {
                w,
                b,
                crossbar: crossbar.clone(),
                perturbations: perturbations.to_vec(),
                activation: activations[l],
                in_dim: n_in,
                out_dim: n_out,
            });
        }

        let mut model = Self {
            layers,
            params,
            loss,
            stuck_stream: stream.child("stuck"),
            initial_programming: Vec::new(),
        };
        model.capture_initial_programming();
        model.apply_freeze_masks();
        Ok(model)
    }

    fn capture_initial_programming(&mut self) {
        self.initial_programming = self
            .layers
            .iter()
            .map(|layer| program_weights(&self.params.get(layer.w).value, &layer.crossbar))
            .collect();
    }

    /// Deterministic stuck realization for a layer and spec: same
    /// (experiment stream, layer, rho, policy) always yields the same mask
    /// and pinned values.
    pub fn stuck_mask_for(&self, layer_idx: usize, rho: f64, policy: StuckPolicy) -> StuckMask {
        let layer = &self.layers[layer_idx];
        let label = format!(
            "layer{layer_idx}/rho{:016x}/{policy:?}",
            rho.to_bits()
        );
        let mut rng = self.stuck_stream.child(&label).rng();
        let init = &self.initial_programming[layer_idx];
        sample_stuck_mask(
            &[layer.out_dim, layer.in_dim],
            rho,
            policy,
            &layer.crossbar,
            Some((&init.g_p, &init.g_n)),
            &mut rng,
        )
    }

    fn apply_freeze_masks(&mut self) {
        for idx in 0..self.layers.len() {
            let mut combined: Option<Vec<bool>> = None;
            for spec in self.layers[idx].perturbations.clone() {
                if let PerturbationSpec::StuckAt { rho, stuck_policy } = spec {
                    if rho > 0.0 {
                        let mask = self.stuck_mask_for(idx, rho, stuck_policy);
                        let frozen = mask.frozen();
                        combined = Some(match combined {
                            None => frozen,
                            Some(prev) => prev
                                .into_iter()
                                .zip(frozen)
                                .map(|(a, b)| a || b)
                                .collect(),
                        });
                    }
                }
            }
            let w = self.layers[idx].w;
            self.params.get_mut(w).freeze = combined;
        }
    }

    /// Replace the stored per-layer perturbation lists (same list for all
    /// layers) and refresh freeze masks accordingly.
    pub fn set_perturbations(&mut self, perturbations: &[PerturbationSpec]) -> Result<()> {
        validate_pipeline(perturbations)?;
        for layer in &mut self.layers {
            layer.perturbations = perturbations.to_vec();
        }
        self.apply_freeze_masks();
        Ok(())
    }

    /// Frozen-coordinate mask per layer implied by a perturbation list
    /// (used when diagnosing lists the model was not trained with).
    pub fn frozen_masks_for(&self, lists: &[Vec<PerturbationSpec>]) -> Vec<Option<Vec<bool>>> {
        (0..self.layers.len())
            .map(|idx| {
                let mut combined: Option<Vec<bool>> = None;
                for spec in &lists[idx] {
                    if let PerturbationSpec::StuckAt { rho, stuck_policy } = spec {
                        if *rho > 0.0 {
                            let frozen = self.stuck_mask_for(idx, *rho, *stuck_policy).frozen();
                            combined = Some(match combined {
                                None => frozen,
                                Some(prev) => prev
                                    .into_iter()
                                    .zip(frozen)
                                    .map(|(a, b)| a || b)
                                    .collect(),
                            });
                        }
                    }
                }
                combined
            })
            .collect()
    }

    pub fn initial_programming(&self, layer_idx: usize) -> &ProgrammedPair {
        &self.initial_programming[layer_idx]
    }

    /// Total number of crossbar-mapped weight entries.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| self.params.get(l.w).value.len())
            .sum()
    }

    /// Flattened copy of all weight matrices, layer order.
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for l in &self.layers {
            out.extend_from_slice(self.params.get(l.w).value.data());
        }
        out
    }
}
