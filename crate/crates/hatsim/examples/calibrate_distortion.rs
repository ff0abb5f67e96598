//! Distortion-matched strength search: find the IR-drop strength that
//! induces a target global distortion, printing the trial history.
//!
//! ```bash
//! cargo run --release --example calibrate_distortion
//! ```

use hatsim::experiment::dataset::{synth_dataset, DatasetKind};
use hatsim::experiment::runner::calibrate_strength_on_model;
use hatsim::hat::{Activation, HatModel, LossKind, Trainer};
use hatsim::perturb::PerturbationSpec;
use hatsim::{CalibrationConfig, CrossbarConfig, RngStream, TrainConfig};

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
    let subset = data.train.head(512);

    for target in [0.05, 0.01] {
        let cal = CalibrationConfig {
            delta_target: target,
            ..Default::default()
        };
        let family = vec![PerturbationSpec::IrDropSimplified { beta: 1.0 }];
        let result = calibrate_strength_on_model(
            &model,
            &subset.x,
            &family,
            0,
            &cal,
            &master.child("calibrate"),
            &trainer.time,
        )
        .unwrap();
        println!("target delta_global = {target}");
        for (i, (s, d)) in result.history.iter().enumerate() {
            println!("  trial {:>2}: s = {s:<12.6} delta = {d:.5}", i + 1);
        }
        println!(
            "  -> s* = {} (achieved {:.5}, converged: {})\n",
            result.s_star, result.achieved_delta, result.converged
        );
    }
}
