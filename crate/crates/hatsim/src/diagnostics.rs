//! Learnability diagnostics: gradient expectation consistency, gradient
//! variance, sensitivity, output-distortion metrics, gradient-norm traces,
//! and the regime classifier.
//!
//! All gradient-domain signals are measured over the crossbar-mapped weight
//! matrices (biases are digital and excluded), flattened in layer order.
//! Coordinates frozen by stuck masks are zeroed, mirroring training, and are
//! reported separately as `frozen_fraction`. Variance uses the population
//! convention.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{HatError, Result};
use crate::hat::pipeline::{
    forward, forward_with_averaged_weights, loss_node, ForwardStreams, PipelineMode,
};
use crate::hat::{HatModel, TimeState};
use crate::perturb::PerturbationSpec;
use crate::rng::RngStream;
use crate::tensor::TensorValue;

// ---------------------------------------------------------------------------
// Distortion metrics
// ---------------------------------------------------------------------------

/// Relative output distortion: mean over batch rows of
/// `‖ỹ − y‖₂ / (‖y‖₂ + ε)`.
pub fn distortion_delta(
    y_clean: &TensorValue,
    y_pert: &TensorValue,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(HatError::NonPositiveEpsilon(eps));
    }
    if y_clean.shape() != y_pert.shape() {
        return Err(HatError::ShapeMismatch {
            op: "distortion_delta",
            lhs: y_clean.shape().to_vec(),
            rhs: y_pert.shape().to_vec(),
        });
    }
    let (b, c) = (y_clean.rows(), y_clean.cols());
    let mut acc = 0.0;
    for r in 0..b {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for j in 0..c {
            let yv = y_clean.data()[r * c + j];
            let dv = y_pert.data()[r * c + j] - yv;
            diff += dv * dv;
            norm += yv * yv;
        }
        acc += diff.sqrt() / (norm.sqrt() + eps);
    }
    Ok(acc / b as f64)
}

/// Network-aggregated distortion:
/// `Σ_l ‖ỹ⁽ˡ⁾ − y⁽ˡ⁾‖₂ / (Σ_l ‖y⁽ˡ⁾‖₂ + ε)` with Frobenius norms over the
/// whole batch output of each layer.
pub fn distortion_global(
    clean: &[TensorValue],
    pert: &[TensorValue],
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(HatError::NonPositiveEpsilon(eps));
    }
    if clean.len() != pert.len() {
        return Err(HatError::ShapeMismatch {
            op: "distortion_global",
            lhs: vec![clean.len()],
            rhs: vec![pert.len()],
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, p) in clean.iter().zip(pert) {
        let diff = c.zip_map(p, |a, b| b - a)?;
        num += diff.l2_norm();
        den += c.l2_norm();
    }
    Ok(num / (den + eps))
}

// ---------------------------------------------------------------------------
// Gradient sampling
// ---------------------------------------------------------------------------

/// A source of per-draw flattened gradients for Monte-Carlo diagnostics.
/// Implementations must be deterministic per draw index.
pub trait GradientSampler {
    fn sample(&mut self, draw: usize) -> Result<Vec<f64>>;
    fn spec_name(&self) -> String {
        "custom".into()
    }
}

/// Flattened, frozen-masked gradient of the loss w.r.t. all weight matrices
/// for one noise draw.
pub fn weight_gradient(
    model: &HatModel,
    x: &TensorValue,
    y: &[usize],
    targets: Option<&TensorValue>,
    lists: &[Vec<PerturbationSpec>],
    streams: &ForwardStreams,
    time: &TimeState,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let fwd = forward(&mut g, model, xn, streams, time, PipelineMode::Override(lists))?;
    let loss = loss_node(&mut g, model, fwd.logits, y, targets)?;
    let bw = g.backward(loss)?;
    let masks = model.frozen_masks_for(lists);
    let mut out = Vec::with_capacity(model.weight_count());
    for (idx, (_, leaf)) in fwd.weight_leaves.iter().enumerate() {
        let len = model.params.get(model.layers[idx].w).value.len();
        match bw.grad(*leaf) {
            Some(gr) => {
                for (k, &v) in gr.iter().enumerate() {
                    let frozen = masks[idx].as_ref().is_some_and(|m| m[k]);
                    out.push(if frozen { 0.0 } else { v });
                }
            }
            None => out.extend(std::iter::repeat_n(0.0, len)),
        }
    }
    Ok(out)
}

/// Gradient sampler over a model/batch/spec-list triple: each draw uses a
/// fresh programming and read scope.
pub struct ModelGradientSampler<'a> {
    pub model: &'a HatModel,
    pub x: &'a TensorValue,
    pub y: &'a [usize],
    pub targets: Option<&'a TensorValue>,
    pub lists: &'a [Vec<PerturbationSpec>],
    pub scope: RngStream,
    pub time: TimeState,
}

impl GradientSampler for ModelGradientSampler<'_> {
    fn sample(&mut self, draw: usize) -> Result<Vec<f64>> {
        let base = self.scope.child(&format!("draw{draw}"));
        let streams = ForwardStreams {
            programming: base.child("prog"),
            read: base.child("read"),
        };
        weight_gradient(
            self.model,
            self.x,
            self.y,
            self.targets,
            self.lists,
            &streams,
            &self.time,
        )
    }

    fn spec_name(&self) -> String {
        self.lists
            .first()
            .map(|l| {
                l.iter()
                    .map(PerturbationSpec::name)
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .unwrap_or_default()
    }
}

// ---------------------------------------------------------------------------
// Gradient variance
// ---------------------------------------------------------------------------

/// Mean over parameter entries of the per-entry population variance of the
/// gradient across `k` independent noise draws. Non-finite gradients are an
/// error naming the spec — that symptom itself marks Regime III.
pub fn gradient_variance_mc(sampler: &mut dyn GradientSampler, k: usize) -> Result<f64> {
    assert!(k >= 2, "variance needs at least two draws");
    let mut draws = Vec::with_capacity(k);
    for d in 0..k {
        let g = sampler.sample(d)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(HatError::Diagnostics {
                spec: sampler.spec_name(),
                msg: format!("non-finite gradient on draw {d}"),
            });
        }
        draws.push(g);
    }
    Ok(population_variance(&draws))
}

/// Outcome of the fault-tolerant variance measurement used by `diagnose`:
/// divergence or non-finite draws are counted rather than propagated.
#[derive(Debug, Clone)]
pub struct VarianceOutcome {
    pub variance: f64,
    pub successes: usize,
    pub instability_events: usize,
    pub nonfinite_observed: bool,
}

pub fn gradient_variance_tolerant(sampler: &mut dyn GradientSampler, k: usize) -> VarianceOutcome {
    let mut draws = Vec::with_capacity(k);
    let mut instability = 0usize;
    let mut nonfinite = false;
    for d in 0..k {
        match sampler.sample(d) {
            Ok(g) => {
                if g.iter().any(|v| !v.is_finite()) {
                    nonfinite = true;
                    instability += 1;
                } else {
                    draws.push(g);
                }
            }
            Err(HatError::CoupledDiverged { .. }) => instability += 1,
            Err(HatError::NonFiniteLoss { .. }) | Err(HatError::NonFinite { .. }) => {
                nonfinite = true;
                instability += 1;
            }
            Err(_) => instability += 1,
        }
    }
    let variance = if draws.len() >= 2 {
        population_variance(&draws)
    } else {
        0.0
    };
    VarianceOutcome {
        variance,
        successes: draws.len(),
        instability_events: instability,
        nonfinite_observed: nonfinite,
    }
}

fn population_variance(draws: &[Vec<f64>]) -> f64 {
    let k = draws.len();
    let dim = draws[0].len();
    if dim == 0 {
        return 0.0;
    }
    // Identical draws (deterministic spec) are exactly zero variance.
    if draws.iter().all(|d| d == &draws[0]) {
        return 0.0;
    }
    let mut acc = 0.0;
    for e in 0..dim {
        let mean = draws.iter().map(|d| d[e]).sum::<f64>() / k as f64;
        let var = draws
            .iter()
            .map(|d| (d[e] - mean) * (d[e] - mean))
            .sum::<f64>()
            / k as f64;
        acc += var;
    }
    acc / dim as f64
}

// ---------------------------------------------------------------------------
// Expectation consistency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConsistencyOut {
    pub cosine: f64,
    /// Set when either side is the zero vector (e.g. quantizer with no
    /// surrogate): the score is reported as 0.
    pub degenerate: bool,
}

/// Cosine similarity between (a) the mean of `k` per-draw gradients and
/// (b) the gradient computed on the `k`-draw-averaged effective weights.
#[allow(clippy::too_many_arguments)]
pub fn expectation_consistency(
    model: &HatModel,
    x: &TensorValue,
    y: &[usize],
    targets: Option<&TensorValue>,
    lists: &[Vec<PerturbationSpec>],
    k: usize,
    scope: &RngStream,
    time: &TimeState,
) -> Result<ConsistencyOut> {
    assert!(k >= 2, "expectation consistency needs K >= 2");
    // LHS: E_ξ[∇L].
    let mut lhs = vec![0.0; model.weight_count()];
    for d in 0..k {
        let base = scope.child(&format!("lhs/draw{d}"));
        let streams = ForwardStreams {
            programming: base.child("prog"),
            read: base.child("read"),
        };
        let g = weight_gradient(model, x, y, targets, lists, &streams, time)?;
        for (a, v) in lhs.iter_mut().zip(g) {
            *a += v;
        }
    }
    for v in &mut lhs {
        *v /= k as f64;
    }

    // RHS: ∇L at the K-draw-averaged effective weights.
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let fwd =
        forward_with_averaged_weights(&mut g, model, xn, lists, k, &scope.child("rhs"), time)?;
    let loss = loss_node(&mut g, model, fwd.logits, y, targets)?;
    let bw = g.backward(loss)?;
    let masks = model.frozen_masks_for(lists);
    let mut rhs = Vec::with_capacity(model.weight_count());
    for (idx, (_, leaf)) in fwd.weight_leaves.iter().enumerate() {
        let len = model.params.get(model.layers[idx].w).value.len();
        match bw.grad(*leaf) {
            Some(gr) => {
                for (kk, &v) in gr.iter().enumerate() {
                    let frozen = masks[idx].as_ref().is_some_and(|m| m[kk]);
                    rhs.push(if frozen { 0.0 } else { v });
                }
            }
            None => rhs.extend(std::iter::repeat_n(0.0, len)),
        }
    }

    let na = lhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(ConsistencyOut {
            cosine: 0.0,
            degenerate: true,
        });
    }
    let dot: f64 = lhs.iter().zip(&rhs).map(|(a, b)| a * b).sum();
    Ok(ConsistencyOut {
        cosine: dot / (na * nb),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SensitivityOut {
    /// Fraction of exactly-nonzero gradient entries over the active
    /// (non-frozen) weight coordinates.
    pub nonzero_fraction: f64,
    /// Fraction of weight coordinates frozen by stuck masks.
    pub frozen_fraction: f64,
    pub grad_norm: f64,
}

/// One perturbed backward pass; reports the exact-zero structure of the
/// weight gradient.
pub fn sensitivity_probe(
    model: &HatModel,
    x: &TensorValue,
    y: &[usize],
    targets: Option<&TensorValue>,
    lists: &[Vec<PerturbationSpec>],
    scope: &RngStream,
    time: &TimeState,
) -> Result<SensitivityOut> {
    let base = scope.child("probe");
    let streams = ForwardStreams {
        programming: base.child("prog"),
        read: base.child("read"),
    };
    let g = weight_gradient(model, x, y, targets, lists, &streams, time)?;
    let masks = model.frozen_masks_for(lists);
    let mut frozen_flags = Vec::with_capacity(g.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        let len = model.params.get(layer.w).value.len();
        match &masks[idx] {
            Some(m) => frozen_flags.extend(m.iter().copied()),
            None => frozen_flags.extend(std::iter::repeat_n(false, len)),
        }
    }
    let total = g.len();
    let frozen = frozen_flags.iter().filter(|&&f| f).count();
    let active = total - frozen;
    let nonzero = g
        .iter()
        .zip(&frozen_flags)
        .filter(|(v, f)| !**f && **v != 0.0)
        .count();
    Ok(SensitivityOut {
        nonzero_fraction: if active > 0 {
            nonzero as f64 / active as f64
        } else {
            0.0
        },
        frozen_fraction: frozen as f64 / total as f64,
        grad_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Gradient-norm trace
// ---------------------------------------------------------------------------

/// Rolling gradient-norm statistics over training iterations.
#[derive(Debug, Clone)]
pub struct GradientTrace {
    norms: Vec<f64>,
    window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub empty: bool,
}

impl GradientTrace {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "window must be >= 1");
        Self {
            norms: Vec::new(),
            window,
        }
    }

    pub fn record(&mut self, grad_norm: f64) {
        debug_assert!(grad_norm >= 0.0);
        self.norms.push(grad_norm);
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Population mean/std over the trailing window.
    pub fn rolling(&self) -> TraceSummary {
        let tail = if self.norms.len() > self.window {
            &self.norms[self.norms.len() - self.window..]
        } else {
            &self.norms[..]
        };
        Self::stats(tail)
    }

    /// Population mean/std over the whole trace.
    pub fn summary(&self) -> TraceSummary {
        Self::stats(&self.norms)
    }

    fn stats(xs: &[f64]) -> TraceSummary {
        if xs.is_empty() {
            return TraceSummary {
                mean: 0.0,
                std: 0.0,
                count: 0,
                empty: true,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        TraceSummary {
            mean,
            std: var.sqrt(),
            count: xs.len(),
            empty: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Regime classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    I,
    II,
    III,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::I => write!(f, "I"),
            Regime::II => write!(f, "II"),
            Regime::III => write!(f, "III"),
        }
    }
}

/// Thresholds used by the classifier, recorded in every report. `t_var` is
/// an absolute variance bound; `diagnose` derives it as
/// `t_var_multiplier ×` the variance of an additive reference calibrated to
/// the same global distortion as the spec under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub t_sens: f64,
    pub t_frozen: f64,
    pub t_var: f64,
    pub t_var_multiplier: f64,
    /// σ_r of the distortion-matched additive reference (when calibrated).
    pub reference_sigma_r: Option<f64>,
    /// Gradient variance of that reference.
    pub reference_variance: Option<f64>,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            t_sens: 0.01,
            t_frozen: 0.01,
            t_var: f64::INFINITY,
            t_var_multiplier: 100.0,
            reference_sigma_r: None,
            reference_variance: None,
        }
    }
}

/// Measurements feeding the classifier.
#[derive(Debug, Clone, Copy)]
pub struct RegimeInputs {
    pub sensitivity_fraction: f64,
    pub grad_variance: f64,
    pub frozen_fraction: f64,
    pub nonfinite_observed: bool,
}

/// Pure classification: Regime III on sensitivity collapse, variance beyond
/// the threshold, or observed non-finite gradients; Regime II when frozen
/// coordinates exceed the threshold while the remaining signals pass;
/// Regime I otherwise.
pub fn classify_regime(m: &RegimeInputs, th: &RegimeThresholds) -> Regime {
    if m.nonfinite_observed || m.sensitivity_fraction < th.t_sens || m.grad_variance > th.t_var {
        Regime::III
    } else if m.frozen_fraction > th.t_frozen {
        Regime::II
    } else {
        Regime::I
    }
}

/// Flat diagnostics report; serializes with fixed key names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub consistency_cosine: f64,
    pub consistency_degenerate: bool,
    pub grad_variance: f64,
    pub sensitivity_fraction: f64,
    pub frozen_fraction: f64,
    pub sensitivity_norm: f64,
    pub delta_global: f64,
    pub regime: Regime,
    pub thresholds: RegimeThresholds,
    pub instability_events: usize,
    pub nonfinite_observed: bool,
}
