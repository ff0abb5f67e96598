//! Hardware-aware training versus clean training under read noise.
//!
//! Trains a 2→32→2 MLP on the rings dataset twice — once clean, once with
//! noise injected into the forward pass — then evaluates both under the same
//! inference-time noise.
//!
//! ```bash
//! cargo run --release --example train_hat
//! ```

use hatsim::experiment::dataset::{synth_dataset, DatasetKind};
use hatsim::hat::{evaluate, Activation, HatModel, LossKind, Trainer};
use hatsim::perturb::PerturbationSpec;
use hatsim::{CrossbarConfig, RngStream, TrainConfig};

fn main() {
    let sigma_r = 4.2e-5;
    let data = synth_dataset(DatasetKind::Rings, 4000, 0.05, 7).unwrap();
    let master = RngStream::new(7, "experiment");
    let crossbar = CrossbarConfig {
        array_size: 8,
        ..CrossbarConfig::default()
    };
    let cfg = TrainConfig {
        steps: Some(2000),
        ..TrainConfig::default()
    };
    let specs = vec![PerturbationSpec::Additive { sigma_r }];

    let train = |train_specs: &[PerturbationSpec]| -> (HatModel, hatsim::TimeState) {
        let mut model = HatModel::mlp(
            &[2, 32, 2],
            &[Activation::Relu, Activation::Identity],
            &crossbar,
            train_specs,
            LossKind::CrossEntropy,
            &master.child("model"),
        )
        .unwrap();
        let mut trainer = Trainer::new(&cfg, data.train.len(), master.child("train")).unwrap();
        trainer
            .run(&mut model, &data.train.x, &data.train.y, |_, _| Ok(()))
            .unwrap();
        (model, trainer.time)
    };

    let (clean_model, t_clean) = train(&[]);
    let (hat_model, t_hat) = train(&specs);

    let lists = vec![specs.clone(); 2];
    let eval_scope = master.child("eval");
    let clean_ref = evaluate(
        &clean_model, &data.test.x, &data.test.y, None, &eval_scope, &t_clean, 1,
    )
    .unwrap();
    let clean_noisy = evaluate(
        &clean_model,
        &data.test.x,
        &data.test.y,
        Some(&lists),
        &eval_scope,
        &t_clean,
        16,
    )
    .unwrap();
    let hat_noisy = evaluate(
        &hat_model,
        &data.test.x,
        &data.test.y,
        Some(&lists),
        &eval_scope,
        &t_hat,
        16,
    )
    .unwrap();

    println!("read noise sigma_r = {sigma_r:.1e} S\n");
    println!("clean-trained, clean inference:     {:.2}%", 100.0 * clean_ref.accuracy_mean);
    println!(
        "clean-trained, noisy inference:     {:.2}% ± {:.2}  (uncompensated)",
        100.0 * clean_noisy.accuracy_mean,
        100.0 * clean_noisy.accuracy_std
    );
    println!(
        "HAT-trained,   noisy inference:     {:.2}% ± {:.2}  (compensated)",
        100.0 * hat_noisy.accuracy_mean,
        100.0 * hat_noisy.accuracy_std
    );
}
