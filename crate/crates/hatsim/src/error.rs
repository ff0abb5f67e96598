//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HatError {
    #[error("shape mismatch in {op}: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward pass requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),

    #[error("quantizer range is empty: lo {lo} >= hi {hi}")]
    QuantRange { lo: f64, hi: f64 },

    #[error(
        "coupled IR-drop iteration diverged after {iterations} iterations \
         (last max change {last_change:.3e}); strength is un-simulable"
    )]
    CoupledDiverged {
        iterations: usize,
        last_change: f64,
        /// Last voltage iterate, flattened row-major.
        last_iterate: Vec<f64>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown sweep axis `{0}`: no perturbation spec carries that field")]
    UnknownSweepAxis(String),

    #[error("unknown dataset kind `{0}` (expected blobs, rings, or xor)")]
    UnknownDatasetKind(String),

    #[error("dataset too small: n = {n}, need at least {min}")]
    DatasetTooSmall { n: usize, min: usize },

    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("calibration failed: {msg} (trial history: {history:?})")]
    CalibrationFailed {
        msg: String,
        history: Vec<(f64, f64)>,
    },

    #[error("diagnostics failed for spec `{spec}`: {msg}")]
    Diagnostics { spec: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HatError>;
