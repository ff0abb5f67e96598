//! Measure the three learnability diagnostics for each perturbation class
//! and print the regime table: expectation consistency, gradient variance,
//! sensitivity → compensation regime I/II/III.
//!
//! ```bash
//! cargo run --release --example diagnose_regimes
//! ```

use hatsim::diagnostics::RegimeThresholds;
use hatsim::experiment::dataset::{synth_dataset, DatasetKind};
use hatsim::experiment::diagnose::diagnose_model;
use hatsim::hat::{Activation, HatModel, LossKind, Trainer};
use hatsim::perturb::quantize::{RangePolicy, Surrogate};
use hatsim::perturb::{PerturbationSpec, StuckPolicy};
use hatsim::{CrossbarConfig, RngStream, TrainConfig};

fn main() {
    let data = synth_dataset(DatasetKind::Rings, 4000, 0.05, 7).unwrap();
    let master = RngStream::new(7, "experiment");
    let crossbar = CrossbarConfig {
        array_size: 8,
        ..CrossbarConfig::default()
    };
    let mut model = HatModel::mlp(
        &[2, 32, 2],
        &[Activation::Relu, Activation::Identity],
        &crossbar,
        &[],
        LossKind::CrossEntropy,
        &master.child("model"),
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: Some(2000),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, data.train.len(), master.child("train")).unwrap();
    trainer
        .run(&mut model, &data.train.x, &data.train.y, |_, _| Ok(()))
        .unwrap();
    let batch = data.train.head(128);

    let adc = |sur| PerturbationSpec::AdcQuant {
        bits: 8,
        range_policy: RangePolicy::Fixed { lo: -8.0, hi: 8.0 },
        surrogate: sur,
    };
    let suite: Vec<(&str, Vec<PerturbationSpec>)> = vec![
        ("additive", vec![PerturbationSpec::Additive { sigma_r: 1e-7 }]),
        ("multiplicative", vec![PerturbationSpec::Multiplicative { sigma_v: 0.1 }]),
        (
            "projection (rho 0.3)",
            vec![PerturbationSpec::StuckAt {
                rho: 0.3,
                stuck_policy: StuckPolicy::HoldProgrammed,
            }],
        ),
        ("input scaling", vec![PerturbationSpec::IrDropSimplified { beta: 0.3 }]),
        (
            "coupled IR-drop",
            vec![PerturbationSpec::IrDropCoupled {
                s: 0.375,
                r_wire: 20.0,
                max_iters: 50,
                tol: 1e-9,
                sigma_parasitic: 1.0,
            }],
        ),
        ("discretization (direct)", vec![adc(Surrogate::None)]),
        ("discretization (STE)", vec![adc(Surrogate::Ste)]),
    ];

    println!(
        "{:<26} {:>7} {:>11} {:>7} {:>7} {:>7}  regime",
        "class", "cosine", "grad var", "sens", "frozen", "delta"
    );
    for (name, specs) in suite {
        let lists = vec![specs; model.layers.len()];
        let report = diagnose_model(
            &model,
            &batch,
            &lists,
            128,
            &RegimeThresholds::default(),
            &master.child("diagnose"),
            &trainer.time,
        )
        .unwrap();
        println!(
            "{:<26} {:>7.3} {:>11.3e} {:>7.3} {:>7.3} {:>7.4}  {}{}",
            name,
            report.consistency_cosine,
            report.grad_variance,
            report.sensitivity_fraction,
            report.frozen_fraction,
            report.delta_global,
            report.regime,
            if report.instability_events > 0 {
                format!("  ({} unstable draws)", report.instability_events)
            } else {
                String::new()
            }
        );
    }
}
