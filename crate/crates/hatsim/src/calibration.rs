//! Distortion-matched strength search: find the strength `s*` at which a
//! perturbation family reaches a target global distortion, so different
//! IR-drop models can be compared at equal δ_global.

use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub delta_target: f64,
    pub trials: usize,
    pub s0: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Early-stop band as a fraction of the target.
    pub band: f64,
    /// Sample count of the fixed evaluation subset.
    pub samples: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            delta_target: 0.05,
            trials: 20,
            s0: 1.0,
            clip_lo: 1e-8,
            clip_hi: 1.0,
            band: 0.10,
            samples: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub s_star: f64,
    pub achieved_delta: f64,
    pub trials_used: usize,
    /// (s_t, δ_t) per trial, in order.
    pub history: Vec<(f64, f64)>,
    pub converged: bool,
}

/// Halve-or-grow search on a deterministic distortion objective:
/// `s ← s/2` when δ(s) overshoots the target, `s ← 1.5·s` otherwise,
/// clipped to `[clip_lo, clip_hi]`, stopping early inside the band
/// `|δ − δ_target| ≤ band·δ_target`. Without early stop the best trial by
/// distance to target is returned with `converged = false`.
pub fn calibrate_strength(
    mut delta_of: impl FnMut(f64) -> Result<f64>,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    assert!(cfg.delta_target > 0.0, "target distortion must be positive");
    assert!(cfg.trials >= 1);
    let mut s = cfg.s0.clamp(cfg.clip_lo, cfg.clip_hi);
    let mut history: Vec<(f64, f64)> = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let delta = delta_of(s)?;
        if !delta.is_finite() {
            return Err(HatError::CalibrationFailed {
                msg: format!("non-finite distortion at s = {s}"),
                history,
            });
        }
        history.push((s, delta));
        if (delta - cfg.delta_target).abs() <= cfg.band * cfg.delta_target {
            return Ok(CalibrationResult {
                s_star: s,
                achieved_delta: delta,
                trials_used: history.len(),
                history,
                converged: true,
            });
        }
        let next = if delta > cfg.delta_target { s / 2.0 } else { s * 1.5 };
        s = next.clamp(cfg.clip_lo, cfg.clip_hi);
    }
    // Best trial by distance to target; first wins ties.
    let (best_s, best_d) = history
        .iter()
        .copied()
        .min_by(|a, b| {
            let da = (a.1 - cfg.delta_target).abs();
            let db = (b.1 - cfg.delta_target).abs();
            da.partial_cmp(&db).expect("finite distances")
        })
        .expect("at least one trial");
    Ok(CalibrationResult {
        s_star: best_s,
        achieved_delta: best_d,
        trials_used: history.len(),
        history,
        converged: false,
    })
}
