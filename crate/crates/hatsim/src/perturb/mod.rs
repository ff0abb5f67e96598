//! The six perturbation classes, the write model, and their pipeline staging.
//!
//! Every operator is a pure function over conductances or pre-activations
//! given an explicit RNG stream. Sampling cadence is fixed by convention:
//! programming-time draws (variability, stuck values, write noise) happen once
//! per programming event, read-time draws (read noise, ADC dither, parasitic
//! coupling) happen once per forward pass, and drift is deterministic in the
//! time index.

pub mod conductance;
pub mod ir_drop;
pub mod quantize;
pub mod redundancy;
pub mod write;

use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};
use quantize::{RangePolicy, Surrogate};
use write::WriteModelConfig;

/// Where time for the drift law comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    /// Sample t uniformly from a configured horizon each step.
    Fixed,
    /// Use the running optimizer-step counter.
    Accumulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StuckPolicy {
    /// The device keeps the conductance it held when it failed, i.e. the
    /// value from the initial programming event.
    HoldProgrammed,
    /// The device is pinned to G_min or G_max, drawn uniformly.
    PinToBound,
}

/// Pipeline stage of an operator. Lists must be ordered by stage:
/// programming-time ops before time ops before read ops before output ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Programming,
    Time,
    Read,
    Output,
}

/// Tagged union over the perturbation classes plus the write model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationSpec {
    /// Read / sense-amplifier noise: `G̃ = G + N(0, σ_r²)` per read.
    Additive { sigma_r: f64 },
    /// Programming variability: `G̃ = G ⊙ (1 + N(0, σ_v²))` per programming
    /// event, clipped back to the conductance range.
    Multiplicative { sigma_v: f64 },
    /// Conductance drift `G_t = G_0 (1 − α ln(1 + t/τ))`, clipped at G_min.
    Drift {
        alpha: f64,
        tau: f64,
        time_mode: TimeMode,
    },
    /// Stuck-at faults: each weight coordinate freezes with probability ρ.
    StuckAt {
        rho: f64,
        stuck_policy: StuckPolicy,
    },
    /// Diagonal input attenuation by column depth and a low-order input
    /// statistic.
    IrDropSimplified { beta: f64 },
    /// Fixed-point line-voltage model with per-segment wire resistance and
    /// optional heavy-tailed per-read parasitic fluctuation
    /// (`sigma_parasitic = 0` recovers the deterministic model).
    IrDropCoupled {
        s: f64,
        r_wire: f64,
        max_iters: usize,
        tol: f64,
        #[serde(default)]
        sigma_parasitic: f64,
    },
    /// Uniform ADC on the readout path with a configurable surrogate
    /// backward.
    AdcQuant {
        bits: u32,
        range_policy: RangePolicy,
        surrogate: Surrogate,
    },
    /// Iterative pulse-based programming (cycle-to-cycle write variation).
    WriteModel(WriteModelConfig),
}

impl PerturbationSpec {
    pub fn stage(&self) -> Stage {
        match self {
            Self::Multiplicative { .. } | Self::StuckAt { .. } | Self::WriteModel(_) => {
                Stage::Programming
            }
            Self::Drift { .. } => Stage::Time,
            Self::Additive { .. } => Stage::Read,
            Self::IrDropSimplified { .. } | Self::IrDropCoupled { .. } | Self::AdcQuant { .. } => {
                Stage::Output
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Additive { .. } => "additive",
            Self::Multiplicative { .. } => "multiplicative",
            Self::Drift { .. } => "drift",
            Self::StuckAt { .. } => "stuck-at",
            Self::IrDropSimplified { .. } => "ir-drop-simplified",
            Self::IrDropCoupled { .. } => "ir-drop-coupled",
            Self::AdcQuant { .. } => "adc-quant",
            Self::WriteModel(_) => "write-model",
        }
    }

    /// Does the operator act in the conductance domain (i.e. require the
    /// full programming pipeline rather than the exact clip fast path)?
    pub fn is_conductance_domain(&self) -> bool {
        matches!(
            self.stage(),
            Stage::Programming | Stage::Time | Stage::Read
        ) || matches!(self, Self::IrDropCoupled { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HatError::InvalidSpec(msg));
        match self {
            Self::Additive { sigma_r } => {
                if *sigma_r < 0.0 {
                    return fail(format!("sigma_r must be >= 0, got {sigma_r}"));
                }
            }
            Self::Multiplicative { sigma_v } => {
                if *sigma_v < 0.0 {
                    return fail(format!("sigma_v must be >= 0, got {sigma_v}"));
                }
            }
            Self::Drift { alpha, tau, .. } => {
                if *alpha < 0.0 {
                    return fail(format!("alpha must be >= 0, got {alpha}"));
                }
                if *tau <= 0.0 {
                    return fail(format!("tau must be > 0, got {tau}"));
                }
            }
            Self::StuckAt { rho, .. } => {
                if !(0.0..=1.0).contains(rho) {
                    return fail(format!("rho must be in [0, 1], got {rho}"));
                }
            }
            Self::IrDropSimplified { beta } => {
                if *beta < 0.0 {
                    return fail(format!("beta must be >= 0, got {beta}"));
                }
            }
            Self::IrDropCoupled {
                s,
                r_wire,
                max_iters,
                tol,
                sigma_parasitic,
            } => {
                if *s < 0.0 || *r_wire < 0.0 || *sigma_parasitic < 0.0 {
                    return fail("coupled IR-drop parameters must be >= 0".into());
                }
                if *max_iters < 1 {
                    return fail(format!("max_iters must be >= 1, got {max_iters}"));
                }
                if *tol <= 0.0 {
                    return fail(format!("tol must be > 0, got {tol}"));
                }
            }
            Self::AdcQuant {
                bits, range_policy, ..
            } => {
                if *bits < 1 {
                    return fail(format!("adc bits must be >= 1, got {bits}"));
                }
                if let RangePolicy::Fixed { lo, hi } = range_policy {
                    if lo >= hi {
                        return Err(HatError::QuantRange { lo: *lo, hi: *hi });
                    }
                }
            }
            Self::WriteModel(cfg) => cfg.validate()?,
        }
        Ok(())
    }

    /// Set a sweepable numeric field by name. Returns true when this spec
    /// carries the field.
    pub fn set_axis(&mut self, axis: &str, value: f64) -> bool {
        match (self, axis) {
            (Self::Additive { sigma_r }, "sigma_r") => {
                *sigma_r = value;
                true
            }
            (Self::Multiplicative { sigma_v }, "sigma_v") => {
                *sigma_v = value;
                true
            }
            (Self::Drift { alpha, .. }, "alpha") => {
                *alpha = value;
                true
            }
            (Self::Drift { tau, .. }, "tau") => {
                *tau = value;
                true
            }
            (Self::StuckAt { rho, .. }, "rho") => {
                *rho = value;
                true
            }
            (Self::IrDropSimplified { beta }, "beta") => {
                *beta = value;
                true
            }
            (Self::IrDropCoupled { s, .. }, "s") => {
                *s = value;
                true
            }
            (Self::IrDropCoupled { r_wire, .. }, "r_wire") => {
                *r_wire = value;
                true
            }
            (Self::IrDropCoupled { sigma_parasitic, .. }, "sigma_parasitic") => {
                *sigma_parasitic = value;
                true
            }
            (Self::AdcQuant { bits, .. }, "bits") => {
                *bits = value.round().max(1.0) as u32;
                true
            }
            _ => false,
        }
    }

    /// The calibration module scales one strength field; map it here.
    pub fn set_strength(&mut self, s: f64) -> bool {
        match self {
            Self::IrDropSimplified { beta } => {
                *beta = s;
                true
            }
            Self::IrDropCoupled { s: strength, .. } => {
                *strength = s;
                true
            }
            Self::Additive { sigma_r } => {
                *sigma_r = s;
                true
            }
            Self::Multiplicative { sigma_v } => {
                *sigma_v = s;
                true
            }
            _ => false,
        }
    }
}

/// Validate an ordered perturbation list: stages must be non-decreasing and
/// at most one IR-drop operator may be present.
pub fn validate_pipeline(specs: &[PerturbationSpec]) -> Result<()> {
    let mut last = Stage::Programming;
    let mut ir_drops = 0;
    for spec in specs {
        spec.validate()?;
        let st = spec.stage();
        if st < last {
            return Err(HatError::InvalidSpec(format!(
                "perturbation list out of pipeline order: `{}` ({:?}) after {:?}",
                spec.name(),
                st,
                last
            )));
        }
        last = st;
        if matches!(
            spec,
            PerturbationSpec::IrDropSimplified { .. } | PerturbationSpec::IrDropCoupled { .. }
        ) {
            ir_drops += 1;
        }
    }
    if ir_drops > 1 {
        return Err(HatError::InvalidSpec(
            "at most one IR-drop operator per layer".into(),
        ));
    }
    Ok(())
}
