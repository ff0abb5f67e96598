//! Finite-difference verification of the backward pass.
//!
//! Every differentiable primitive is checked against central differences on
//! random small tensors over 100 seeds, and the full crossbar pipeline is
//! checked per perturbation class with frozen noise.

use hatsim::autodiff::{fd_gradient_param, Graph, NodeId, ParamStore, Parameter};
use hatsim::diagnostics::weight_gradient;
use hatsim::hat::pipeline::ForwardStreams;
use hatsim::hat::{Activation, HatModel, LossKind, TimeState};
use hatsim::perturb::quantize::Surrogate;
use hatsim::perturb::{PerturbationSpec, StuckPolicy, TimeMode};
use hatsim::{CrossbarConfig, RngStream, TensorValue};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Random tensor with entries kept away from the kinks of relu/abs/clip so
/// central differences stay on one smooth branch.
fn margin_tensor(shape: &[usize], rng: &mut impl Rng) -> TensorValue {
    TensorValue::from_fn(shape, |_| {
        let mag = rng.gen_range(0.15..0.85);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        sign * mag
    })
}

fn assert_close(ad: &[f64], fd: &[f64], what: &str, seed: u64) {
    for (i, (a, f)) in ad.iter().zip(fd).enumerate() {
        let tol = TOL * a.abs().max(f.abs()).max(1e-4);
        assert!(
            (a - f).abs() <= tol,
            "{what} seed {seed} entry {i}: ad {a} vs fd {f}"
        );
    }
}

/// Check one scalar-valued graph builder against finite differences for the
/// single parameter in the store.
fn check(
    what: &str,
    seed: u64,
    store: &mut ParamStore,
    build: impl Fn(&ParamStore, &mut Graph) -> NodeId,
) {
    let id = hatsim::ParamId(0);
    let mut g = Graph::new();
    let root = build(store, &mut g);
    let bw = g.backward(root).unwrap();
    let mut grads = store.clone();
    grads.zero_grads();
    g.accumulate_param_grads(&bw, &mut grads);
    let ad = grads.get(id).grad.clone();

    let fd = fd_gradient_param(
        store,
        id,
        |s| {
            let mut g = Graph::new();
            let root = build(s, &mut g);
            Ok(g.value(root).data()[0])
        },
        H,
    )
    .unwrap();
    assert_close(ad.data(), fd.data(), what, seed);
}

#[test]
fn primitives_match_finite_differences_over_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = RngStream::new(seed, "gradcheck").rng();
        let id = hatsim::ParamId(0);
        let _ = id;

        // Linear + bias + relu + softmax-CE composite (exercises matmul
        // orientation, broadcast, and the loss backward at once).
        {
            let w = margin_tensor(&[3, 4], &mut rng);
            let x = margin_tensor(&[2, 4], &mut rng);
            let mut store = ParamStore::new();
            store.add(Parameter::new(w));
            check("linear+ce", seed, &mut store, |s, g| {
                let wn = g.param(s, hatsim::ParamId(0));
                let xn = g.leaf(x.clone());
                let z = g.linear(xn, wn).unwrap();
                let r = g.relu(z);
                g.softmax_cross_entropy(r, &[0, 2]).unwrap()
            });
        }

        // MatMul both sides via mean reduction.
        {
            let a = margin_tensor(&[2, 3], &mut rng);
            let b = margin_tensor(&[3, 2], &mut rng);
            let mut store = ParamStore::new();
            store.add(Parameter::new(a));
            check("matmul-lhs", seed, &mut store, |s, g| {
                let an = g.param(s, hatsim::ParamId(0));
                let bn = g.leaf(b.clone());
                let c = g.matmul(an, bn).unwrap();
                let sq = g.square(c);
                g.mean_all(sq)
            });
        }

        // Elementwise chain: mul, add, sub, neg, abs, square, scale,
        // add_scalar, clip, clamp_min.
        {
            let a = margin_tensor(&[3, 3], &mut rng);
            let b = margin_tensor(&[3, 3], &mut rng);
            let mut store = ParamStore::new();
            store.add(Parameter::new(a));
            check("elementwise-chain", seed, &mut store, |s, g| {
                let an = g.param(s, hatsim::ParamId(0));
                let bn = g.leaf(b.clone());
                let m = g.mul(an, bn).unwrap();
                let ad = g.add(m, an).unwrap();
                let sb = g.sub(ad, bn).unwrap();
                let ng = g.neg(sb);
                let ab = g.abs(ng);
                let sc = g.scale(ab, 1.7);
                let sh = g.add_scalar(sc, 0.1);
                let cl = g.clip(sh, -2.0, 2.0);
                let cm = g.clamp_min(cl, -3.0);
                let sq = g.square(cm);
                g.mean_all(sq)
            });
        }

        // Scalar-node arithmetic through max_abs (the reconstruction scale
        // path of the crossbar pipeline).
        {
            let mut w = margin_tensor(&[2, 4], &mut rng);
            // Make the argmax unique with a comfortable margin.
            w.data_mut()[5] = 1.3;
            let mut store = ParamStore::new();
            store.add(Parameter::new(w));
            check("scale-path", seed, &mut store, |s, g| {
                let wn = g.param(s, hatsim::ParamId(0));
                let sc = g.max_abs(wn);
                let pos = g.relu(wn);
                let div = g.div_scalar_node(pos, sc).unwrap();
                let mul = g.mul_scalar_node(div, sc).unwrap();
                let sq = g.square(mul);
                g.mean_all(sq)
            });
        }

        // Bias broadcast.
        {
            let b = margin_tensor(&[3], &mut rng);
            let z = margin_tensor(&[4, 3], &mut rng);
            let mut store = ParamStore::new();
            store.add(Parameter::new(b));
            check("add-bias", seed, &mut store, |s, g| {
                let bn = g.param(s, hatsim::ParamId(0));
                let zn = g.leaf(z.clone());
                let out = g.add_bias(zn, bn).unwrap();
                let sq = g.square(out);
                g.mean_all(sq)
            });
        }

        // Squared-error loss.
        {
            let p = margin_tensor(&[2, 2], &mut rng);
            let t = margin_tensor(&[2, 2], &mut rng);
            let mut store = ParamStore::new();
            store.add(Parameter::new(p));
            check("half-squared-error", seed, &mut store, |s, g| {
                let pn = g.param(s, hatsim::ParamId(0));
                g.half_squared_error(pn, t.clone()).unwrap()
            });
        }

        // Stochastic quantizer surrogate: frozen dither, identity backward.
        {
            let z = margin_tensor(&[2, 3], &mut rng);
            let noise = TensorValue::from_fn(&[2, 3], |_| rng.gen_range(-0.05..0.05));
            let kernel =
                hatsim::perturb::quantize::QuantKernel::new(-2.0, 2.0, 4).unwrap();
            let mut store = ParamStore::new();
            store.add(Parameter::new(z));
            check("quantize-stochastic", seed, &mut store, |s, g| {
                let zn = g.param(s, hatsim::ParamId(0));
                let q = g
                    .quantize(zn, Some(kernel), Surrogate::Stochastic, Some(noise.clone()))
                    .unwrap();
                let sq = g.square(q);
                g.mean_all(sq)
            });
        }

        // Averaging node.
        {
            let a = margin_tensor(&[2, 2], &mut rng);
            let b = margin_tensor(&[2, 2], &mut rng);
            let mut store = ParamStore::new();
            store.add(Parameter::new(a));
            check("avg-n", seed, &mut store, |s, g| {
                let an = g.param(s, hatsim::ParamId(0));
                let bn = g.leaf(b.clone());
                let sq = g.square(an);
                let avg = g.avg_n(&[an, bn, sq]).unwrap();
                let m = g.mean_all(avg);
                g.square(m)
            });
        }

        // Simplified IR-drop: both the weight input and the x input
        // (including the m(x) statistic path).
        {
            let w = margin_tensor(&[3, 5], &mut rng);
            let mut x = margin_tensor(&[2, 5], &mut rng);
            // Unique per-row |x| argmax with margin.
            x.data_mut()[2] = 1.4;
            x.data_mut()[8] = -1.5;
            let mut store = ParamStore::new();
            store.add(Parameter::new(w.clone()));
            check("irdrop-simplified-w", seed, &mut store, |s, g| {
                let wn = g.param(s, hatsim::ParamId(0));
                let xn = g.leaf(x.clone());
                let z = g.ir_drop_simplified(wn, xn, 0.8, 2, 1e-12).unwrap();
                let sq = g.square(z);
                g.mean_all(sq)
            });
            let mut store_x = ParamStore::new();
            store_x.add(Parameter::new(x.clone()));
            check("irdrop-simplified-x", seed, &mut store_x, |s, g| {
                let xn = g.param(s, hatsim::ParamId(0));
                let wn = g.leaf(w.clone());
                let z = g.ir_drop_simplified(wn, xn, 0.8, 2, 1e-12).unwrap();
                let sq = g.square(z);
                g.mean_all(sq)
            });
        }

        // Coupled IR-drop: weight, conductance-sum, and x inputs.
        {
            let w = margin_tensor(&[2, 3], &mut rng);
            let gsum = TensorValue::from_fn(&[2, 3], |_| rng.gen_range(2e-6..2e-4));
            let x = margin_tensor(&[2, 3], &mut rng);
            let params = hatsim::perturb::ir_drop::CoupledParams {
                strength: 0.6,
                r_wire: 300.0,
                max_iters: 200,
                tol: 1e-13,
            };
            let mut store = ParamStore::new();
            store.add(Parameter::new(w.clone()));
            check("irdrop-coupled-w", seed, &mut store, |s, g| {
                let wn = g.param(s, hatsim::ParamId(0));
                let gn = g.leaf(gsum.clone());
                let xn = g.leaf(x.clone());
                let z = g.ir_drop_coupled(wn, gn, xn, &params, 4, None).unwrap();
                let sq = g.square(z);
                g.mean_all(sq)
            });
            let mut store_x = ParamStore::new();
            store_x.add(Parameter::new(x.clone()));
            check("irdrop-coupled-x", seed, &mut store_x, |s, g| {
                let xn = g.param(s, hatsim::ParamId(0));
                let wn = g.leaf(w.clone());
                let gn = g.leaf(gsum.clone());
                let z = g.ir_drop_coupled(wn, gn, xn, &params, 4, None).unwrap();
                let sq = g.square(z);
                g.mean_all(sq)
            });
        }
    }
}

#[test]
fn coupled_gsum_gradient_matches_fd() {
    // The attenuation derivative dφ/da chains into the conductance sums;
    // scaled coordinates keep the FD step meaningful (gsum entries are 1e-5
    // scale, so the parameter is a multiplier on a base matrix).
    let mut rng = RngStream::new(5, "gradcheck-gsum").rng();
    let base = TensorValue::from_fn(&[2, 3], |_| rng.gen_range(5e-5..2e-4));
    let mult0 = TensorValue::from_fn(&[2, 3], |_| rng.gen_range(0.5..1.5));
    let w = margin_tensor(&[2, 3], &mut rng);
    let x = margin_tensor(&[2, 3], &mut rng);
    let params = hatsim::perturb::ir_drop::CoupledParams {
        strength: 0.6,
        r_wire: 300.0,
        max_iters: 200,
        tol: 1e-13,
    };
    let mut store = ParamStore::new();
    store.add(Parameter::new(mult0));
    check("irdrop-coupled-gsum", 5, &mut store, |s, g| {
        let mn = g.param(s, hatsim::ParamId(0));
        let bn = g.leaf(base.clone());
        let gsum = g.mul(mn, bn).unwrap();
        let wn = g.leaf(w.clone());
        let xn = g.leaf(x.clone());
        let z = g.ir_drop_coupled(wn, gsum, xn, &params, 4, None).unwrap();
        let sq = g.square(z);
        g.mean_all(sq)
    });
}

// ---------------------------------------------------------------------------
// Pipeline-level checks: autodiff through build_effective_weights per class,
// frozen noise, against finite differences of the same frozen-noise loss.
// ---------------------------------------------------------------------------

fn desk_crossbar() -> CrossbarConfig {
    CrossbarConfig {
        array_size: 8,
        ..CrossbarConfig::default()
    }
}

fn pipeline_fd_check(specs: &[PerturbationSpec], what: &str) {
    let master = RngStream::new(91, "pipeline-fd");
    let model = HatModel::mlp(
        &[2, 6, 2],
        &[Activation::Relu, Activation::Identity],
        &desk_crossbar(),
        specs,
        LossKind::CrossEntropy,
        &master.child("model"),
    )
    .unwrap();
    let mut rng = master.child("batch").rng();
    let x = TensorValue::from_fn(&[4, 2], |_| rng.gen_range(-1.2..1.2));
    let y = vec![0usize, 1, 1, 0];
    let lists = vec![specs.to_vec(); model.layers.len()];
    let time = TimeState::new(100.0);
    let streams = ForwardStreams {
        programming: master.child("frozen/prog"),
        read: master.child("frozen/read"),
    };

    let ad = weight_gradient(&model, &x, &y, None, &lists, &streams, &time).unwrap();

    let frozen = model.frozen_masks_for(&lists);
    let mut offset = 0usize;
    for (li, layer) in model.layers.iter().enumerate() {
        let wid = layer.w;
        let len = model.params.get(wid).value.len();
        let fd_model = model.clone();
        let fd = fd_gradient_param(
            &mut fd_model.params.clone(),
            wid,
            |store| {
                let mut m = fd_model.clone();
                m.params = store.clone();
                let mut g = Graph::new();
                let xn = g.input(x.clone());
                let fwd = hatsim::hat::pipeline::forward(
                    &mut g,
                    &m,
                    xn,
                    &streams,
                    &time,
                    hatsim::hat::PipelineMode::Override(&lists),
                )?;
                let loss = g.softmax_cross_entropy(fwd.logits, &y)?;
                Ok(g.value(loss).data()[0])
            },
            H,
        )
        .unwrap();
        for k in 0..len {
            if frozen[li].as_ref().is_some_and(|m| m[k]) {
                // Frozen coordinates carry zero gradient by contract; the
                // loss may still depend on them through the scale path.
                assert_eq!(ad[offset + k], 0.0, "{what} frozen coord nonzero");
                continue;
            }
            let (a, f) = (ad[offset + k], fd.data()[k]);
            let tol = 1e-3 * a.abs().max(f.abs()).max(1e-6);
            assert!(
                (a - f).abs() <= tol,
                "{what} layer {li} entry {k}: ad {a} vs fd {f}"
            );
        }
        offset += len;
    }
}

#[test]
fn pipeline_fd_additive_default() {
    pipeline_fd_check(&[PerturbationSpec::Additive { sigma_r: 1e-7 }], "additive");
}

#[test]
fn pipeline_fd_multiplicative_default() {
    pipeline_fd_check(
        &[PerturbationSpec::Multiplicative { sigma_v: 0.1 }],
        "multiplicative",
    );
}

#[test]
fn pipeline_fd_drift_default() {
    pipeline_fd_check(
        &[PerturbationSpec::Drift {
            alpha: 1e-4,
            tau: 1.0,
            time_mode: TimeMode::Accumulated,
        }],
        "drift",
    );
}

#[test]
fn pipeline_fd_stuck_default() {
    pipeline_fd_check(
        &[PerturbationSpec::StuckAt {
            rho: 0.1,
            stuck_policy: StuckPolicy::HoldProgrammed,
        }],
        "stuck",
    );
}

#[test]
fn pipeline_fd_ir_drop_simplified_default() {
    pipeline_fd_check(
        &[PerturbationSpec::IrDropSimplified { beta: 0.01 }],
        "ir-drop-simplified",
    );
}

#[test]
fn pipeline_fd_ir_drop_coupled() {
    pipeline_fd_check(
        &[PerturbationSpec::IrDropCoupled {
            s: 0.2,
            r_wire: 20.0,
            max_iters: 200,
            tol: 1e-13,
            sigma_parasitic: 0.0,
        }],
        "ir-drop-coupled",
    );
}

#[test]
fn pipeline_fd_joint_defaults() {
    // All conductance-domain classes together at Table defaults.
    pipeline_fd_check(
        &[
            PerturbationSpec::Multiplicative { sigma_v: 0.1 },
            PerturbationSpec::StuckAt {
                rho: 0.1,
                stuck_policy: StuckPolicy::HoldProgrammed,
            },
            PerturbationSpec::Drift {
                alpha: 1e-4,
                tau: 1.0,
                time_mode: TimeMode::Accumulated,
            },
            PerturbationSpec::Additive { sigma_r: 1e-7 },
        ],
        "joint",
    );
}
