//! Gradient behavior of the ADC quantizer under its four surrogate modes.
//!
//! Without a surrogate the task gradient vanishes identically; the
//! straight-through estimator, stochastic relaxation, and sigmoid-smoothing
//! each restore a different flavor of gradient signal.
//!
//! ```bash
//! cargo run --release --example quantizer_surrogates
//! ```

use hatsim::diagnostics::sensitivity_probe;
use hatsim::hat::{Activation, HatModel, LossKind, TimeState};
use hatsim::perturb::quantize::{RangePolicy, Surrogate};
use hatsim::perturb::PerturbationSpec;
use hatsim::{CrossbarConfig, RngStream, TensorValue};
use rand::Rng;

fn main() {
    let master = RngStream::new(3, "surrogates");
    let model = HatModel::mlp(
        &[2, 16, 2],
        &[Activation::Relu, Activation::Identity],
        &CrossbarConfig::default(),
        &[],
        LossKind::CrossEntropy,
        &master.child("model"),
    )
    .unwrap();
    let mut rng = master.child("x").rng();
    let x = TensorValue::from_fn(&[32, 2], |_| rng.gen_range(-1.5..1.5));
    let y: Vec<usize> = (0..32).map(|i| i % 2).collect();
    let time = TimeState::new(1.0);

    let modes = [
        ("none", Surrogate::None),
        ("ste", Surrogate::Ste),
        ("stochastic", Surrogate::Stochastic),
        ("smooth (alpha 30)", Surrogate::Smooth { alpha_smooth: 30.0 }),
    ];
    println!("8-bit ADC over [-8, 8]; gradient structure per surrogate mode:\n");
    println!("{:<18} {:>14} {:>16}", "surrogate", "nonzero frac", "gradient norm");
    for (name, sur) in modes {
        let specs = vec![PerturbationSpec::AdcQuant {
            bits: 8,
            range_policy: RangePolicy::Fixed { lo: -8.0, hi: 8.0 },
            surrogate: sur,
        }];
        let lists = vec![specs; model.layers.len()];
        let probe = sensitivity_probe(
            &model,
            &x,
            &y,
            None,
            &lists,
            &master.child("probe"),
            &time,
        )
        .unwrap();
        println!(
            "{:<18} {:>14.3} {:>16.3e}",
            name, probe.nonzero_fraction, probe.grad_norm
        );
    }
    println!("\ngradient accessibility, not bit-width, separates these rows:");
    println!("the forward pass is identical for none/ste/smooth.");
}
