//! Differential weight-to-conductance programming and effective-weight
//! reconstruction.
//!
//! A signed weight matrix is clamped to the programmable range, split into
//! positive/negative parts, normalized by the largest clamped magnitude, and
//! mapped linearly onto a conductance pair `(G_p, G_n)`. The effective weight
//! seen by the forward pass is rebuilt from the (possibly perturbed) pair:
//!
//! `W_eff = (G_p − G_n) · scale / (G_max − G_min)`
//!
//! With no perturbation the roundtrip reproduces the clamped weights to
//! floating-point accuracy.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::TensorValue;

/// Device-level constants of one crossbar array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarConfig {
    /// Lowest programmable conductance, siemens.
    pub g_min: f64,
    /// Highest programmable conductance, siemens.
    pub g_max: f64,
    /// Lower weight clipping bound.
    pub w_min: f64,
    /// Upper weight clipping bound.
    pub w_max: f64,
    /// Logical column count per physical array; wide layers are split into
    /// column blocks of at most this width.
    pub array_size: usize,
    /// Readout ADC precision in bits.
    pub adc_bits: u32,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            g_min: 1e-6,
            g_max: 1e-4,
            w_min: -1.0,
            w_max: 1.0,
            array_size: 128,
            adc_bits: 8,
        }
    }
}

impl CrossbarConfig {
    pub fn g_range(&self) -> f64 {
        self.g_max - self.g_min
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.g_min && self.g_min < self.g_max) {
            return Err(crate::error::HatError::InvalidConfig(format!(
                "require 0 < g_min < g_max, got g_min={} g_max={}",
                self.g_min, self.g_max
            )));
        }
        if self.w_min >= self.w_max {
            return Err(crate::error::HatError::InvalidConfig(format!(
                "require w_min < w_max, got w_min={} w_max={}",
                self.w_min, self.w_max
            )));
        }
        if self.array_size == 0 || self.adc_bits == 0 {
            return Err(crate::error::HatError::InvalidConfig(
                "array_size and adc_bits must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Positive/negative conductance matrices plus the digital reconstruction
/// scale (the largest absolute clamped weight).
#[derive(Debug, Clone)]
pub struct ProgrammedPair {
    pub g_p: TensorValue,
    pub g_n: TensorValue,
    pub scale: f64,
}

/// Program a weight matrix onto a differential conductance pair.
///
/// The all-zero matrix is a declared degenerate case: both conductance
/// matrices sit at `G_min` and the scale is recorded as 0, so reconstruction
/// yields the zero matrix.
pub fn program_weights(w: &TensorValue, cfg: &CrossbarConfig) -> ProgrammedPair {
    let clamped = w.map(|v| v.clamp(cfg.w_min, cfg.w_max));
    let scale = clamped.max_abs();
    if scale == 0.0 {
        return ProgrammedPair {
            g_p: TensorValue::full(w.shape(), cfg.g_min),
            g_n: TensorValue::full(w.shape(), cfg.g_min),
            scale: 0.0,
        };
    }
    let range = cfg.g_range();
    // Clamp after mapping: the algebra keeps W_p, W_n in [0, 1], the extra
    // clamp only absorbs last-ulp rounding at the interval ends.
    let g_p = clamped.map(|v| (cfg.g_min + (v.max(0.0) / scale) * range).clamp(cfg.g_min, cfg.g_max));
    let g_n =
        clamped.map(|v| (cfg.g_min + ((-v).max(0.0) / scale) * range).clamp(cfg.g_min, cfg.g_max));
    ProgrammedPair { g_p, g_n, scale }
}

/// Rebuild the effective weight matrix from a (possibly perturbed) pair.
pub fn reconstruct_effective(pair: &ProgrammedPair, cfg: &CrossbarConfig) -> Result<TensorValue> {
    let k = pair.scale / cfg.g_range();
    pair.g_p.zip_map(&pair.g_n, |p, n| (p - n) * k)
}

/// Contiguous column index ranges of at most `array_size` columns.
pub fn column_blocks(n_cols: usize, array_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(array_size >= 1, "array_size must be >= 1");
    let mut blocks = Vec::with_capacity(n_cols.div_ceil(array_size));
    let mut start = 0;
    while start < n_cols {
        let end = (start + array_size).min(n_cols);
        blocks.push(start..end);
        start = end;
    }
    blocks
}

/// Depth of each column inside its block, 0-indexed.
pub fn column_depths(n_cols: usize, array_size: usize) -> Vec<usize> {
    let mut depth = vec![0usize; n_cols];
    for block in column_blocks(n_cols, array_size) {
        for (d, j) in block.enumerate() {
            depth[j] = d;
        }
    }
    depth
}
