//! Experiment front end: dataset synthesis, JSON configs, run/sweep/diagnose
//! orchestration, and CSV/JSON emission.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod diagnose;
pub mod runner;

pub use config::{config_hash, ExperimentConfig};
pub use dataset::{synth_dataset, DataSplit, Dataset, DatasetKind};
pub use diagnose::diagnose;
pub use runner::{run, sweep, RunRecord};
