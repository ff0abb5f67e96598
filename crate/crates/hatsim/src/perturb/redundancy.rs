//! Fault-rate / redundancy relation for stuck-at perturbations.

use rand::Rng;

use crate::error::{HatError, Result};

/// Smallest integer `r` with `r ≥ p(1−p)·(L_W·C·‖W‖/ε)²`.
///
/// Near-integer bounds are snapped before the ceiling so hand values like
/// `0.1·0.9·100 = 9` do not round up on float dust.
pub fn required_redundancy(p: f64, l_w: f64, c_amp: f64, norm_w: f64, eps: f64) -> Result<u64> {
    if eps <= 0.0 {
        return Err(HatError::NonPositiveEpsilon(eps));
    }
    assert!((0.0..=1.0).contains(&p), "p must be in [0, 1]");
    let factor = l_w * c_amp * norm_w / eps;
    let bound = p * (1.0 - p) * factor * factor;
    let snapped = bound.round();
    let r = if (bound - snapped).abs() <= 1e-9 * bound.abs().max(1.0) {
        snapped
    } else {
        bound.ceil()
    };
    Ok(r.max(0.0) as u64)
}

/// Monte-Carlo estimate of `Var(Δw̄)` for `r` redundant copies of a weight,
/// each stuck to `α·w` with probability `p`. Population variance over
/// `samples` draws of the averaged perturbation; the closed form is
/// `p(1−p)(αw)²/r`.
pub fn averaged_stuck_variance_mc(
    w: f64,
    alpha_stuck: f64,
    p: f64,
    r: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert!(r >= 1 && samples >= 1);
    if p == 0.0 {
        return 0.0;
    }
    let e = alpha_stuck * w;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut acc = 0.0;
        for _ in 0..r {
            if rng.gen::<f64>() < p {
                acc += e;
            }
        }
        let mean = acc / r as f64;
        sum += mean;
        sum_sq += mean * mean;
    }
    let n = samples as f64;
    let m = sum / n;
    (sum_sq / n - m * m).max(0.0)
}

/// Closed form `p(1−p)(αw)²/r` from the redundancy analysis.
pub fn averaged_stuck_variance_closed_form(w: f64, alpha_stuck: f64, p: f64, r: usize) -> f64 {
    p * (1.0 - p) * (alpha_stuck * w) * (alpha_stuck * w) / r as f64
}
