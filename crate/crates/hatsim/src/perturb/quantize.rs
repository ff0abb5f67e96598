//! Uniform ADC quantizer and its surrogate-gradient modes.
//!
//! The forward quantizer maps a pre-activation onto `2^bits` levels spanning
//! a fixed or per-batch range, rounding half away from zero. Its true
//! derivative is zero almost everywhere, so the backward behavior is selected
//! explicitly:
//!
//! * `none`      — honest zero gradient
//! * `ste`       — straight-through: identity inside the range, zero outside
//! * `stochastic`— forward replaced by additive uniform noise of one step,
//!   backward identity
//! * `smooth`    — quantized forward, backward from a sigmoid-sum
//!   approximation of the staircase

use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Surrogate {
    None,
    Ste,
    Stochastic,
    Smooth { alpha_smooth: f64 },
}

/// How the quantizer range is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum RangePolicy {
    Fixed { lo: f64, hi: f64 },
    PerBatchMinmax,
}

/// A resolved uniform quantizer: `levels = 2^bits` levels over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantKernel {
    pub lo: f64,
    pub hi: f64,
    pub levels: u32,
    pub step: f64,
}

impl QuantKernel {
    pub fn new(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        if lo >= hi {
            return Err(HatError::QuantRange { lo, hi });
        }
        if bits == 0 || bits > 30 {
            return Err(HatError::InvalidSpec(format!(
                "adc bits must be in 1..=30, got {bits}"
            )));
        }
        let levels = 1u32 << bits;
        let step = (hi - lo) / (levels - 1) as f64;
        Ok(Self {
            lo,
            hi,
            levels,
            step,
        })
    }

    /// `z̃ = lo + round((clip(z) − lo)/Δq)·Δq`, round half away from zero.
    pub fn quantize(&self, z: f64) -> f64 {
        let c = z.clamp(self.lo, self.hi);
        let k = ((c - self.lo) / self.step).round();
        self.lo + k * self.step
    }

    pub fn in_range(&self, z: f64) -> bool {
        (self.lo..=self.hi).contains(&z)
    }

    /// Derivative of the sigmoid-sum staircase approximation
    /// `Q(z) ≈ lo + Δq·Σ_t σ(α(z − b_t))` at `z`, with decision boundaries
    /// `b_t` halfway between levels.
    pub fn smooth_derivative(&self, z: f64, alpha: f64) -> f64 {
        let mut acc = 0.0;
        for t in 1..self.levels {
            let boundary = self.lo + (t as f64 - 0.5) * self.step;
            let s = sigmoid(alpha * (z - boundary));
            acc += alpha * s * (1.0 - s);
        }
        self.step * acc
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_hand_example() {
        // Levels {-1, -1/3, 1/3, 1}; 0.3 snaps to 1/3.
        let k = QuantKernel::new(-1.0, 1.0, 2).unwrap();
        assert!((k.quantize(0.3) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(k.quantize(-2.0), -1.0);
        assert_eq!(k.quantize(2.0), 1.0);
    }

    #[test]
    fn level_is_fixed_point() {
        let k = QuantKernel::new(-1.0, 1.0, 2).unwrap();
        for i in 0..4 {
            let level = -1.0 + i as f64 * k.step;
            assert_eq!(k.quantize(level), level);
        }
    }

    #[test]
    fn idempotent() {
        let k = QuantKernel::new(-0.7, 1.3, 5).unwrap();
        for i in 0..1000 {
            let z = -1.0 + i as f64 * 0.0025;
            let q = k.quantize(z);
            assert_eq!(k.quantize(q), q);
        }
    }

    #[test]
    fn empty_range_rejected() {
        assert!(QuantKernel::new(1.0, 1.0, 4).is_err());
        assert!(QuantKernel::new(2.0, 1.0, 4).is_err());
    }

    #[test]
    fn round_half_away_from_zero() {
        // bits=1 over [-1, 1]: step 2, boundary at 0; exactly halfway values
        // round away from zero.
        let k = QuantKernel::new(-1.0, 1.0, 1).unwrap();
        assert_eq!(k.quantize(0.0), 1.0); // (0−(−1))/2 = 0.5 → 1
    }

    #[test]
    fn smooth_derivative_peaks_at_boundary() {
        let k = QuantKernel::new(-1.0, 1.0, 2).unwrap();
        let alpha = 40.0;
        let at_boundary = k.smooth_derivative(-1.0 / 3.0 - k.step / 2.0 + 1.0 / 3.0, alpha);
        let mid_level = k.smooth_derivative(1.0 / 3.0, alpha);
        assert!(at_boundary > mid_level);
        // Peak value of one sigmoid term: Δq·α/4.
        let boundary = -1.0 + 0.5 * k.step;
        let d = k.smooth_derivative(boundary, alpha);
        assert!((d - k.step * alpha / 4.0).abs() / d < 0.05);
    }
}
