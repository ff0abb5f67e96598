//! Desk-scale crossbar non-ideality simulator and hardware-aware-training
//! (HAT) diagnostics toolkit.
//!
//! The crate programs software weights onto a simulated analog crossbar
//! (differential conductance pairs), injects six classes of structured
//! perturbations into the forward operator — read noise, programming
//! variability, drift, stuck-at faults, IR-drop, ADC discretization — trains
//! small dense networks through the perturbed forward pass, and measures the
//! learnability diagnostics (gradient expectation consistency, gradient
//! variance, sensitivity) that separate compensable from non-compensable
//! non-idealities.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each one demonstrates a major capability. The `hatsim` binary drives full
//! experiments from JSON configs (`run`, `sweep`, `diagnose`, `calibrate`,
//! `synth-data`).

// Numeric kernels index into several parallel buffers at once; explicit
// index loops read clearer there than zipped iterator chains.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod calibration;
pub mod crossbar;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod hat;
pub mod perturb;
pub mod rng;
pub mod tensor;

pub use autodiff::{
    finite_difference_gradient, sgd_update, Graph, NodeId, OptimizerState, ParamId, ParamStore,
    Parameter,
};
pub use calibration::{calibrate_strength, CalibrationConfig, CalibrationResult};
pub use crossbar::{
    column_blocks, program_weights, reconstruct_effective, CrossbarConfig, ProgrammedPair,
};
pub use diagnostics::{
    classify_regime, distortion_delta, distortion_global, expectation_consistency,
    gradient_variance_mc, sensitivity_probe, DiagnosticsReport, GradientTrace, Regime,
    RegimeThresholds,
};
pub use error::{HatError, Result};
pub use hat::{evaluate, hat_train_step, Activation, HatModel, LossKind, TimeState, TrainConfig};
pub use perturb::{PerturbationSpec, StuckPolicy, TimeMode};
pub use rng::RngStream;
pub use tensor::TensorValue;

/// Version stamp embedded in every emitted artifact.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
