//! Effective-weight construction and the perturbed layer forward pass.
//!
//! Pipeline per layer: program → programming-time ops (variability, stuck,
//! write) → time ops (drift) → read ops (read noise) → reconstruct →
//! output-path ops (IR-drop, ADC) → bias → activation. Sampled noises enter
//! the graph as constants, so gradients flow to the software weights while
//! treating the draws as fixed — stuck coordinates contribute zero gradient
//! via their freeze masks.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::Result;
use crate::hat::{Activation, HatModel, LossKind, TimeState};
use crate::perturb::conductance::{draw_read_noise, draw_variability_factor, drift_factor};
use crate::perturb::ir_drop::{draw_parasitic, CoupledParams, STAT_EPS};
use crate::perturb::quantize::{QuantKernel, RangePolicy, Surrogate};
use crate::perturb::write::write_program;
use crate::perturb::{PerturbationSpec, Stage, TimeMode};
use crate::rng::RngStream;
use crate::tensor::TensorValue;

/// RNG scopes of one forward pass. Programming-time draws come from
/// `programming` (fixed across evaluation draws: the device is programmed
/// once), read-time draws from `read` (fresh per forward pass).
#[derive(Debug, Clone)]
pub struct ForwardStreams {
    pub programming: RngStream,
    pub read: RngStream,
}

impl ForwardStreams {
    /// Training: both scopes fresh per optimizer step.
    pub fn for_step(master: &RngStream, step: usize) -> Self {
        let s = master.child(&format!("step{step}"));
        Self {
            programming: s.child("prog"),
            read: s.child("read"),
        }
    }

    /// Evaluation: one programming event shared by all draws, fresh reads.
    pub fn for_eval_draw(scope: &RngStream, draw: usize) -> Self {
        Self {
            programming: scope.child("programming"),
            read: scope.child(&format!("draw{draw}")),
        }
    }
}

/// Which perturbation lists a forward pass uses.
#[derive(Debug, Clone, Copy)]
pub enum PipelineMode<'a> {
    /// No perturbations anywhere (exact clipped weights).
    Clean,
    /// The lists stored on the model's layers.
    Stored,
    /// Explicit per-layer lists (e.g. evaluation-time specs).
    Override(&'a [Vec<PerturbationSpec>]),
}

pub struct EffectiveWeights {
    pub w_eff: NodeId,
    pub w_leaf: NodeId,
    /// `G̃_p + G̃_n` when an op downstream needs it (coupled IR-drop).
    pub gsum: Option<NodeId>,
    pub drift_collapsed: bool,
}

/// Build the effective weight matrix of one layer as a graph node.
///
/// With no conductance-domain op in `specs` the pipeline reduces to
/// `W_eff = clip(W)` exactly (bit-for-bit), which is also the clean path.
pub fn build_effective_weights(
    g: &mut Graph,
    model: &HatModel,
    layer_idx: usize,
    specs: &[PerturbationSpec],
    streams: &ForwardStreams,
    time: &TimeState,
) -> Result<EffectiveWeights> {
    let layer = &model.layers[layer_idx];
    let cfg = &layer.crossbar;
    let w_leaf = g.param(&model.params, layer.w);
    let clamped = g.clip(w_leaf, cfg.w_min, cfg.w_max);

    let needs_pipeline = specs.iter().any(PerturbationSpec::is_conductance_domain);
    if !needs_pipeline {
        return Ok(EffectiveWeights {
            w_eff: clamped,
            w_leaf,
            gsum: None,
            drift_collapsed: false,
        });
    }

    let shape = [layer.out_dim, layer.in_dim];
    let range = cfg.g_range();
    let scale_node = g.max_abs(clamped);
    let scale_val = g.value(scale_node).data()[0];

    let (mut gp, mut gn) = if scale_val == 0.0 {
        // Degenerate all-zero matrix: both arrays sit at G_min; the final
        // multiplication by the zero scale reconstructs the zero matrix.
        (
            g.leaf(TensorValue::full(&shape, cfg.g_min)),
            g.leaf(TensorValue::full(&shape, cfg.g_min)),
        )
    } else {
        let w_pos = g.relu(clamped);
        let neg = g.neg(clamped);
        let w_neg = g.relu(neg);
        let wp = g.div_scalar_node(w_pos, scale_node)?;
        let wn = g.div_scalar_node(w_neg, scale_node)?;
        let sp = g.scale(wp, range);
        let sn = g.scale(wn, range);
        (g.add_scalar(sp, cfg.g_min), g.add_scalar(sn, cfg.g_min))
    };

    let mut drift_collapsed = false;
    for spec in specs.iter().filter(|s| s.stage() != Stage::Output) {
        match spec {
            PerturbationSpec::Multiplicative { sigma_v } if *sigma_v > 0.0 => {
                let mut rp = streams.programming.child("variability/p").rng();
                let fp = draw_variability_factor(&shape, *sigma_v, &mut rp);
                gp = g.mul_const(gp, fp)?;
                gp = g.clip(gp, cfg.g_min, cfg.g_max);
                let mut rn = streams.programming.child("variability/n").rng();
                let fn_ = draw_variability_factor(&shape, *sigma_v, &mut rn);
                gn = g.mul_const(gn, fn_)?;
                gn = g.clip(gn, cfg.g_min, cfg.g_max);
            }
            PerturbationSpec::Multiplicative { .. } => {}
            PerturbationSpec::StuckAt { rho, stuck_policy } if *rho > 0.0 => {
                let mask = model.stuck_mask_for(layer_idx, *rho, *stuck_policy);
                gp = g.stuck_select(gp, mask.active.clone(), mask.pinned_p)?;
                gn = g.stuck_select(gn, mask.active, mask.pinned_n)?;
            }
            PerturbationSpec::StuckAt { .. } => {}
            PerturbationSpec::WriteModel(wcfg) => {
                // Each programming event writes from an erased array (G_min);
                // deviations from the target act as constants in backward.
                let init = TensorValue::full(&shape, cfg.g_min);
                let mut rp = streams.programming.child("write/p").rng();
                let outcome_p = write_program(g.value(gp), &init, wcfg, cfg, &mut rp)?;
                gp = g.surrogate_identity(gp, outcome_p.g)?;
                let mut rn = streams.programming.child("write/n").rng();
                let outcome_n = write_program(g.value(gn), &init, wcfg, cfg, &mut rn)?;
                gn = g.surrogate_identity(gn, outcome_n.g)?;
            }
            PerturbationSpec::Drift {
                alpha,
                tau,
                time_mode,
            } if *alpha > 0.0 => {
                let t = match time_mode {
                    TimeMode::Accumulated => time.step as f64,
                    TimeMode::Fixed => {
                        let mut r = streams.programming.child("drift/t").rng();
                        r.gen_range(0.0..=time.fixed_horizon.max(f64::MIN_POSITIVE))
                    }
                };
                let (factor, collapsed) = drift_factor(*alpha, *tau, t);
                drift_collapsed |= collapsed;
                let dp = g.scale(gp, factor);
                gp = g.clamp_min(dp, cfg.g_min);
                let dn = g.scale(gn, factor);
                gn = g.clamp_min(dn, cfg.g_min);
            }
            PerturbationSpec::Drift { .. } => {}
            PerturbationSpec::Additive { sigma_r } if *sigma_r > 0.0 => {
                let mut rp = streams.read.child("read-noise/p").rng();
                let ep = draw_read_noise(&shape, *sigma_r, &mut rp);
                gp = g.add_const(gp, ep)?;
                let mut rn = streams.read.child("read-noise/n").rng();
                let en = draw_read_noise(&shape, *sigma_r, &mut rn);
                gn = g.add_const(gn, en)?;
            }
            PerturbationSpec::Additive { .. } => {}
            _ => {}
        }
    }

    let needs_gsum = specs
        .iter()
        .any(|s| matches!(s, PerturbationSpec::IrDropCoupled { .. }));
    let gsum = if needs_gsum {
        Some(g.add(gp, gn)?)
    } else {
        None
    };

    let diff = g.sub(gp, gn)?;
    let scaled = g.mul_scalar_node(diff, scale_node)?;
    let w_eff = g.scale(scaled, 1.0 / range);
    Ok(EffectiveWeights {
        w_eff,
        w_leaf,
        gsum,
        drift_collapsed,
    })
}

pub struct ForwardOut {
    pub logits: NodeId,
    /// Post-activation output of every layer, in order.
    pub layer_outputs: Vec<NodeId>,
    /// The weight-parameter leaf of every layer (reused by the range
    /// regularizer so task and regularization share one leaf per parameter).
    pub weight_leaves: Vec<(ParamId, NodeId)>,
    pub drift_collapsed: bool,
}

/// Full perturbed forward pass over the model.
pub fn forward(
    g: &mut Graph,
    model: &HatModel,
    x: NodeId,
    streams: &ForwardStreams,
    time: &TimeState,
    mode: PipelineMode,
) -> Result<ForwardOut> {
    let empty: Vec<PerturbationSpec> = Vec::new();
    let mut h = x;
    let mut layer_outputs = Vec::with_capacity(model.layers.len());
    let mut weight_leaves = Vec::with_capacity(model.layers.len());
    let mut drift_collapsed = false;

    for (idx, layer) in model.layers.iter().enumerate() {
        let specs: &[PerturbationSpec] = match mode {
            PipelineMode::Clean => &empty,
            PipelineMode::Stored => &layer.perturbations,
            PipelineMode::Override(lists) => &lists[idx],
        };
        let layer_streams = ForwardStreams {
            programming: streams.programming.child(&format!("layer{idx}")),
            read: streams.read.child(&format!("layer{idx}")),
        };
        let eff = build_effective_weights(g, model, idx, specs, &layer_streams, time)?;
        drift_collapsed |= eff.drift_collapsed;

        let ir_op = specs.iter().find(|s| {
            matches!(
                s,
                PerturbationSpec::IrDropSimplified { .. } | PerturbationSpec::IrDropCoupled { .. }
            )
        });
        let mut z = match ir_op {
            None => g.linear(h, eff.w_eff)?,
            Some(PerturbationSpec::IrDropSimplified { beta }) => {
                g.ir_drop_simplified(eff.w_eff, h, *beta, layer.crossbar.array_size, STAT_EPS)?
            }
            Some(PerturbationSpec::IrDropCoupled {
                s,
                r_wire,
                max_iters,
                tol,
                sigma_parasitic,
            }) => {
                let gsum = eff.gsum.expect("pipeline provides gsum for coupled IR-drop");
                let params = CoupledParams {
                    strength: *s,
                    r_wire: *r_wire,
                    max_iters: *max_iters,
                    tol: *tol,
                };
                let (b, n) = (g.value(h).rows(), g.value(h).cols());
                let parasitic = {
                    let mut r = layer_streams.read.child("parasitic").rng();
                    draw_parasitic(*sigma_parasitic, b, n, &mut r)
                };
                g.ir_drop_coupled(eff.w_eff, gsum, h, &params, layer.crossbar.array_size, parasitic)?
            }
            Some(_) => unreachable!(),
        };

        let b_leaf = g.param(&model.params, layer.b);
        z = g.add_bias(z, b_leaf)?;

        for (qi, spec) in specs.iter().enumerate() {
            if let PerturbationSpec::AdcQuant {
                bits,
                range_policy,
                surrogate,
            } = spec
            {
                let kernel = resolve_kernel(range_policy, *bits, g.value(z))?;
                let noise = match (surrogate, &kernel) {
                    (Surrogate::Stochastic, Some(k)) => {
                        let mut r = layer_streams.read.child(&format!("adc{qi}")).rng();
                        let half = k.step / 2.0;
                        Some(TensorValue::from_fn(g.value(z).shape(), |_| {
                            r.gen_range(-half..=half)
                        }))
                    }
                    _ => None,
                };
                z = g.quantize(z, kernel, *surrogate, noise)?;
            }
        }

        h = match layer.activation {
            Activation::Relu => g.relu(z),
            Activation::Identity => z,
        };
        layer_outputs.push(h);
        weight_leaves.push((layer.w, eff.w_leaf));
    }

    Ok(ForwardOut {
        logits: h,
        layer_outputs,
        weight_leaves,
        drift_collapsed,
    })
}

/// Forward pass where each layer's effective weights are the average of `k`
/// independent pipeline draws — the right-hand side of the
/// expectation-consistency diagnostic. Output-path draws use a dedicated
/// stream so the pass is deterministic.
pub fn forward_with_averaged_weights(
    g: &mut Graph,
    model: &HatModel,
    x: NodeId,
    lists: &[Vec<PerturbationSpec>],
    k: usize,
    scope: &RngStream,
    time: &TimeState,
) -> Result<ForwardOut> {
    let mut h = x;
    let mut layer_outputs = Vec::new();
    let mut weight_leaves = Vec::new();
    let mut drift_collapsed = false;

    for (idx, layer) in model.layers.iter().enumerate() {
        let specs = &lists[idx];
        let mut w_effs = Vec::with_capacity(k);
        let mut gsums = Vec::with_capacity(k);
        let mut leaf = None;
        for draw in 0..k {
            let streams = ForwardStreams::for_eval_draw(scope, draw);
            let layer_streams = ForwardStreams {
                programming: streams
                    .programming
                    .child(&format!("draw{draw}/layer{idx}")),
                read: streams.read.child(&format!("layer{idx}")),
            };
            let eff = build_effective_weights(g, model, idx, specs, &layer_streams, time)?;
            drift_collapsed |= eff.drift_collapsed;
            w_effs.push(eff.w_eff);
            if let Some(gs) = eff.gsum {
                gsums.push(gs);
            }
            leaf = Some(eff.w_leaf);
        }
        let w_avg = g.avg_n(&w_effs)?;

        let ir_op = specs.iter().find(|s| {
            matches!(
                s,
                PerturbationSpec::IrDropSimplified { .. } | PerturbationSpec::IrDropCoupled { .. }
            )
        });
        let rhs_read = scope.child(&format!("rhs/layer{idx}"));
        let mut z = match ir_op {
            None => g.linear(h, w_avg)?,
            Some(PerturbationSpec::IrDropSimplified { beta }) => {
                g.ir_drop_simplified(w_avg, h, *beta, layer.crossbar.array_size, STAT_EPS)?
            }
            Some(PerturbationSpec::IrDropCoupled {
                s,
                r_wire,
                max_iters,
                tol,
                sigma_parasitic,
            }) => {
                let gsum_avg = g.avg_n(&gsums)?;
                let params = CoupledParams {
                    strength: *s,
                    r_wire: *r_wire,
                    max_iters: *max_iters,
                    tol: *tol,
                };
                let (b, n) = (g.value(h).rows(), g.value(h).cols());
                let parasitic = {
                    let mut r = rhs_read.child("parasitic").rng();
                    draw_parasitic(*sigma_parasitic, b, n, &mut r)
                };
                g.ir_drop_coupled(w_avg, gsum_avg, h, &params, layer.crossbar.array_size, parasitic)?
            }
            Some(_) => unreachable!(),
        };
        let b_leaf = g.param(&model.params, layer.b);
        z = g.add_bias(z, b_leaf)?;
        for (qi, spec) in specs.iter().enumerate() {
            if let PerturbationSpec::AdcQuant {
                bits,
                range_policy,
                surrogate,
            } = spec
            {
                let kernel = resolve_kernel(range_policy, *bits, g.value(z))?;
                let noise = match (surrogate, &kernel) {
                    (Surrogate::Stochastic, Some(kn)) => {
                        let mut r = rhs_read.child(&format!("adc{qi}")).rng();
                        let half = kn.step / 2.0;
                        Some(TensorValue::from_fn(g.value(z).shape(), |_| {
                            r.gen_range(-half..=half)
                        }))
                    }
                    _ => None,
                };
                z = g.quantize(z, kernel, *surrogate, noise)?;
            }
        }
        h = match layer.activation {
            Activation::Relu => g.relu(z),
            Activation::Identity => z,
        };
        layer_outputs.push(h);
        weight_leaves.push((layer.w, leaf.expect("k >= 1")));
    }

    Ok(ForwardOut {
        logits: h,
        layer_outputs,
        weight_leaves,
        drift_collapsed,
    })
}

fn resolve_kernel(
    policy: &RangePolicy,
    bits: u32,
    value: &TensorValue,
) -> Result<Option<QuantKernel>> {
    match policy {
        RangePolicy::Fixed { lo, hi } => Ok(Some(QuantKernel::new(*lo, *hi, bits)?)),
        RangePolicy::PerBatchMinmax => {
            let lo = value.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = value
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            if lo < hi {
                Ok(Some(QuantKernel::new(lo, hi, bits)?))
            } else {
                // All entries equal: quantization is a no-op.
                Ok(None)
            }
        }
    }
}

/// Build the loss node for the model's configured loss kind.
pub fn loss_node(
    g: &mut Graph,
    model: &HatModel,
    logits: NodeId,
    labels: &[usize],
    targets: Option<&TensorValue>,
) -> Result<NodeId> {
    match model.loss {
        LossKind::CrossEntropy => g.softmax_cross_entropy(logits, labels),
        LossKind::SquaredError => {
            let t = targets
                .expect("squared-error loss requires targets")
                .clone();
            g.half_squared_error(logits, t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::CrossbarConfig;
    use crate::hat::LossKind;
    use crate::perturb::StuckPolicy;

    fn model(specs: &[PerturbationSpec]) -> HatModel {
        HatModel::mlp(
            &[2, 4, 2],
            &[Activation::Relu, Activation::Identity],
            &CrossbarConfig::default(),
            specs,
            LossKind::CrossEntropy,
            &RngStream::new(3, "pipe-test"),
        )
        .unwrap()
    }

    fn streams() -> ForwardStreams {
        ForwardStreams::for_step(&RngStream::new(3, "pipe-test/train"), 0)
    }

    #[test]
    fn empty_list_is_exact_clip() {
        let m = model(&[]);
        let mut g = Graph::new();
        let eff =
            build_effective_weights(&mut g, &m, 0, &[], &streams(), &TimeState::new(1.0)).unwrap();
        let w = &m.params.get(m.layers[0].w).value;
        let expect: Vec<f64> = w.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        assert_eq!(g.value(eff.w_eff).data(), expect.as_slice());
    }

    #[test]
    fn additive_mean_reconstructs_clip() {
        let specs = vec![PerturbationSpec::Additive { sigma_r: 1e-7 }];
        let m = model(&specs);
        let time = TimeState::new(1.0);
        let n_draws = 1000;
        let w = &m.params.get(m.layers[0].w).value;
        let mut acc = vec![0.0; w.len()];
        for d in 0..n_draws {
            let mut g = Graph::new();
            let s = ForwardStreams::for_eval_draw(&RngStream::new(7, "mean-test"), d);
            let eff = build_effective_weights(&mut g, &m, 0, &specs, &s, &time).unwrap();
            for (a, v) in acc.iter_mut().zip(g.value(eff.w_eff).data()) {
                *a += v;
            }
        }
        // Per-entry noise std in the weight domain: √2·σ_r·scale/range.
        let scale = w.max_abs();
        let sigma_w = (2.0f64).sqrt() * 1e-7 * scale / 9.9e-5;
        let bound = 4.0 * sigma_w / (n_draws as f64).sqrt();
        for (i, a) in acc.iter().enumerate() {
            let mean = a / n_draws as f64;
            let expect = w.data()[i].clamp(-1.0, 1.0);
            assert!(
                (mean - expect).abs() < bound,
                "entry {i}: mean {mean} expect {expect} bound {bound}"
            );
        }
    }

    #[test]
    fn fully_stuck_pin_to_bound_ignores_weights() {
        let specs = vec![PerturbationSpec::StuckAt {
            rho: 1.0,
            stuck_policy: StuckPolicy::PinToBound,
        }];
        let m = model(&specs);
        let time = TimeState::new(1.0);
        let mut g = Graph::new();
        let x = g.input(TensorValue::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let fwd = forward(&mut g, &m, x, &streams(), &time, PipelineMode::Stored).unwrap();
        let loss = g.softmax_cross_entropy(fwd.logits, &[0]).unwrap();
        let bw = g.backward(loss).unwrap();
        let mut params = m.params.clone();
        g.accumulate_param_grads(&bw, &mut params);
        for layer in &m.layers {
            assert!(params.get(layer.w).grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn eval_draws_share_programming_event() {
        // With only multiplicative (programming-time) noise, two eval draws
        // see identical effective weights.
        let specs = vec![PerturbationSpec::Multiplicative { sigma_v: 0.2 }];
        let m = model(&specs);
        let time = TimeState::new(1.0);
        let scope = RngStream::new(9, "eval-test");
        let w_of = |draw: usize| {
            let mut g = Graph::new();
            let s = ForwardStreams::for_eval_draw(&scope, draw);
            let eff = build_effective_weights(&mut g, &m, 0, &specs, &s, &time).unwrap();
            g.value(eff.w_eff).data().to_vec()
        };
        assert_eq!(w_of(0), w_of(1));
        // Read noise differs across draws.
        let specs2 = vec![PerturbationSpec::Additive { sigma_r: 1e-6 }];
        let w_of2 = |draw: usize| {
            let mut g = Graph::new();
            let s = ForwardStreams::for_eval_draw(&scope, draw);
            let eff = build_effective_weights(&mut g, &m, 0, &specs2, &s, &time).unwrap();
            g.value(eff.w_eff).data().to_vec()
        };
        assert_ne!(w_of2(0), w_of2(1));
    }
}
