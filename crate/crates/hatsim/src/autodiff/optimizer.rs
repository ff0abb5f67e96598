//! SGD with momentum and weight decay.

use crate::autodiff::ParamStore;
use crate::error::{HatError, Result};
use crate::tensor::TensorValue;

/// Optimizer state: hyperparameters plus one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<TensorValue>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(HatError::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(HatError::InvalidConfig(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(HatError::InvalidConfig(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }
}

/// One SGD step over every trainable parameter:
/// `v ← μ·v + (g + wd·w)`, `w ← w − η·v`, then gradients are zeroed.
///
/// Entries under a freeze mask are skipped entirely — no gradient, no decay,
/// no velocity — so frozen coordinates never move.
pub fn sgd_update(store: &mut ParamStore, opt: &mut OptimizerState) {
    if opt.velocity.len() != store.len() {
        opt.velocity = store
            .iter()
            .map(|(_, p)| TensorValue::zeros(p.value.shape()))
            .collect();
    }
    for (id, p) in store.iter_mut() {
        if p.trainable {
            let vel = opt.velocity[id.0].data_mut();
            debug_assert_eq!(vel.len(), p.value.len());
            let freeze = p.freeze.as_deref();
            let w = p.value.data_mut();
            let g = p.grad.data();
            for i in 0..w.len() {
                if freeze.is_some_and(|f| f[i]) {
                    continue;
                }
                let grad = g[i] + opt.weight_decay * w[i];
                vel[i] = opt.momentum * vel[i] + grad;
                w[i] -= opt.learning_rate * vel[i];
            }
        }
        p.grad.data_mut().fill(0.0);
    }
}

/// Cosine-annealed learning rate: `η_t = η₀ · ½(1 + cos(π·t/T))`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = (step as f64 / total_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
