//! Program a weight matrix onto a differential conductance pair, rebuild the
//! effective weights, and then write the target conductances with the
//! iterative pulse model.
//!
//! ```bash
//! cargo run --release --example program_crossbar
//! ```

use hatsim::perturb::write::{write_program, WriteModelConfig};
use hatsim::{program_weights, reconstruct_effective, CrossbarConfig, RngStream, TensorValue};

fn main() {
    let cfg = CrossbarConfig::default();
    let w = TensorValue::new(vec![2, 3], vec![0.5, -0.25, 0.9, -1.4, 0.0, 0.1]).unwrap();
    println!("software weights      {:?}", w.data());

    let pair = program_weights(&w, &cfg);
    println!("scale (max |clamped|) {}", pair.scale);
    println!("G_p [S]               {:?}", pair.g_p.data());
    println!("G_n [S]               {:?}", pair.g_n.data());

    let back = reconstruct_effective(&pair, &cfg).unwrap();
    println!("reconstructed         {:?}", back.data());
    println!("(note the -1.4 entry clamps to the programmable range [-1, 1])");

    // Pulse-based programming from an erased array toward G_p.
    let wcfg = WriteModelConfig::default();
    let erased = TensorValue::full(pair.g_p.shape(), cfg.g_min);
    let mut rng = RngStream::new(42, "example/write").rng();
    let outcome = write_program(&pair.g_p, &erased, &wcfg, &cfg, &mut rng).unwrap();
    println!(
        "\nwrite model: {} pulses (max per entry), residual {:.3e} S (tolerance {:.3e} S)",
        outcome.pulses,
        outcome.max_residual,
        wcfg.delta_tolerance * cfg.g_range()
    );
}
