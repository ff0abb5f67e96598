//! Apply each of the six perturbation classes to the same programmed layer
//! and print the induced relative output distortion.
//!
//! ```bash
//! cargo run --release --example perturbation_zoo
//! ```

use hatsim::diagnostics::distortion_delta;
use hatsim::hat::pipeline::{forward, ForwardStreams, PipelineMode};
use hatsim::hat::{Activation, HatModel, LossKind, TimeState};
use hatsim::perturb::quantize::{RangePolicy, Surrogate};
use hatsim::perturb::{PerturbationSpec, StuckPolicy, TimeMode};
use hatsim::{CrossbarConfig, Graph, RngStream, TensorValue};
use rand::Rng;

fn main() {
    let crossbar = CrossbarConfig {
        array_size: 8,
        ..CrossbarConfig::default()
    };
    let master = RngStream::new(11, "zoo");
    let model = HatModel::mlp(
        &[4, 6, 3],
        &[Activation::Relu, Activation::Identity],
        &crossbar,
        &[],
        LossKind::CrossEntropy,
        &master.child("model"),
    )
    .unwrap();
    let mut rng = master.child("x").rng();
    let x = TensorValue::from_fn(&[8, 4], |_| rng.gen_range(-1.0..1.0));
    let time = TimeState {
        step: 500,
        fixed_horizon: 1000.0,
    };

    let classes: Vec<(&str, Vec<PerturbationSpec>)> = vec![
        ("additive (read noise)", vec![PerturbationSpec::Additive { sigma_r: 1e-5 }]),
        (
            "multiplicative (variability)",
            vec![PerturbationSpec::Multiplicative { sigma_v: 0.1 }],
        ),
        (
            "drift (t = 500 steps)",
            vec![PerturbationSpec::Drift {
                alpha: 1e-2,
                tau: 1.0,
                time_mode: TimeMode::Accumulated,
            }],
        ),
        (
            "projection (stuck-at 30%)",
            vec![PerturbationSpec::StuckAt {
                rho: 0.3,
                stuck_policy: StuckPolicy::PinToBound,
            }],
        ),
        (
            "input scaling (simplified IR-drop)",
            vec![PerturbationSpec::IrDropSimplified { beta: 0.8 }],
        ),
        (
            "coupled IR-drop",
            vec![PerturbationSpec::IrDropCoupled {
                s: 0.5,
                r_wire: 200.0,
                max_iters: 50,
                tol: 1e-9,
                sigma_parasitic: 0.0,
            }],
        ),
        (
            "discretization (4-bit ADC)",
            vec![PerturbationSpec::AdcQuant {
                bits: 4,
                range_policy: RangePolicy::Fixed { lo: -4.0, hi: 4.0 },
                surrogate: Surrogate::None,
            }],
        ),
    ];

    // Clean reference output.
    let mut g0 = Graph::new();
    let x0 = g0.input(x.clone());
    let streams = ForwardStreams::for_eval_draw(&master.child("eval"), 0);
    let clean = forward(&mut g0, &model, x0, &streams, &time, PipelineMode::Clean).unwrap();
    let y_clean = g0.value(clean.logits).clone();

    println!("{:<36} {:>10}", "perturbation class", "delta");
    for (name, specs) in classes {
        let lists = vec![specs; model.layers.len()];
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let out = forward(&mut g, &model, xn, &streams, &time, PipelineMode::Override(&lists))
            .unwrap();
        let delta = distortion_delta(&y_clean, g.value(out.logits), 1e-12).unwrap();
        println!("{name:<36} {delta:>10.4}");
    }
}
