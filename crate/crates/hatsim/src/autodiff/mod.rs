//! Minimal reverse-mode differentiation engine.
//!
//! A [`Graph`] is a Wengert list built eagerly: every insertion computes its
//! value immediately and records enough state for the backward sweep. The
//! primitive set is deliberately small — matrix multiply, elementwise
//! arithmetic, ReLU, softmax cross-entropy, means — plus the perturbation
//! operators, which enter the graph as fused nodes with declared backward
//! behavior (surrogates for the quantizer, frozen-noise constants for the
//! stochastic operators).

pub mod graph;
pub mod optimizer;

pub use graph::{BackwardResult, Graph, NodeId};
pub use optimizer::{sgd_update, OptimizerState};

use crate::error::{HatError, Result};
use crate::tensor::TensorValue;

/// Slot of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: TensorValue,
    pub grad: TensorValue,
    pub trainable: bool,
    /// Coordinates marked `true` are frozen: they receive no gradient and are
    /// skipped entirely by the optimizer (no decay, no momentum).
    pub freeze: Option<Vec<bool>>,
}

impl Parameter {
    pub fn new(value: TensorValue) -> Self {
        let grad = TensorValue::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
            freeze: None,
        }
    }

    pub fn frozen_count(&self) -> usize {
        self.freeze
            .as_ref()
            .map_or(0, |f| f.iter().filter(|&&b| b).count())
    }
}

/// Flat storage for model parameters, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p: Parameter) -> ParamId {
        self.items.push(p);
        ParamId(self.items.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.items[id.0]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.items.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.items
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Central-difference gradient estimate `(ℓ(w+h) − ℓ(w−h)) / 2h` per entry.
///
/// The loss closure must be deterministic (fix the RNG seed) for the estimate
/// to mean anything; a non-finite loss is an error.
pub fn finite_difference_gradient(
    n: usize,
    get: impl Fn(usize) -> f64,
    mut set: impl FnMut(usize, f64),
    mut loss: impl FnMut() -> Result<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut out = vec![0.0; n];
    for k in 0..n {
        let orig = get(k);
        set(k, orig + h);
        let lp = loss()?;
        set(k, orig - h);
        let lm = loss()?;
        set(k, orig);
        if !lp.is_finite() || !lm.is_finite() {
            return Err(HatError::NonFinite {
                context: format!("finite difference at entry {k}"),
            });
        }
        out[k] = (lp - lm) / (2.0 * h);
    }
    Ok(out)
}

/// Finite differences of a loss with respect to one stored parameter.
pub fn fd_gradient_param(
    store: &mut ParamStore,
    id: ParamId,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    h: f64,
) -> Result<TensorValue> {
    let n = store.get(id).value.len();
    let shape = store.get(id).value.shape().to_vec();
    let mut out = vec![0.0; n];
    for k in 0..n {
        let orig = store.get(id).value.data()[k];
        store.get_mut(id).value.data_mut()[k] = orig + h;
        let lp = loss(store)?;
        store.get_mut(id).value.data_mut()[k] = orig - h;
        let lm = loss(store)?;
        store.get_mut(id).value.data_mut()[k] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(HatError::NonFinite {
                context: format!("finite difference at entry {k}"),
            });
        }
        out[k] = (lp - lm) / (2.0 * h);
    }
    TensorValue::new(shape, out)
}
