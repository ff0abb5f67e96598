//! Diagnose a perturbation configuration: run the three learnability signals
//! on a fixed batch and classify the compensation regime.
//!
//! The variance threshold is distortion-matched: an additive read-noise
//! reference is calibrated to the same global distortion as the spec under
//! test, its gradient variance is measured with the same Monte-Carlo budget,
//! and `t_var = t_var_multiplier × reference variance`. Classes whose
//! variance stays within two orders of magnitude of an equally-distorting
//! additive noise are "bounded"; excess beyond that marks Regime III.

use crate::calibration::{calibrate_strength, CalibrationConfig};
use crate::diagnostics::{
    classify_regime, distortion_global, expectation_consistency, gradient_variance_tolerant,
    sensitivity_probe, DiagnosticsReport, ModelGradientSampler, RegimeInputs, RegimeThresholds,
};
use crate::error::{HatError, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::dataset::{synth_dataset, DataSplit};
use crate::hat::pipeline::{forward, ForwardStreams, PipelineMode};
use crate::hat::{HatModel, LossKind, TimeState, Trainer};
use crate::perturb::PerturbationSpec;
use crate::rng::RngStream;
use crate::tensor::TensorValue;

/// Fallback reference σ_r when the spec under test induces no measurable
/// distortion (zero-strength configurations).
const DEFAULT_REFERENCE_SIGMA_R: f64 = 1e-7;

/// Global distortion of `lists` against the clean forward pass, evaluated at
/// a fixed noise draw so the value is deterministic.
pub fn delta_for_lists(
    model: &HatModel,
    x: &TensorValue,
    lists: &[Vec<PerturbationSpec>],
    scope: &RngStream,
    time: &TimeState,
) -> Result<f64> {
    let streams = ForwardStreams {
        programming: scope.child("prog"),
        read: scope.child("read"),
    };
    let mut g_clean = crate::autodiff::Graph::new();
    let xc = g_clean.input(x.clone());
    let clean = forward(&mut g_clean, model, xc, &streams, time, PipelineMode::Clean)?;
    let clean_outs: Vec<TensorValue> = clean
        .layer_outputs
        .iter()
        .map(|&n| g_clean.value(n).clone())
        .collect();

    let mut g = crate::autodiff::Graph::new();
    let xn = g.input(x.clone());
    let pert = forward(&mut g, model, xn, &streams, time, PipelineMode::Override(lists))?;
    let pert_outs: Vec<TensorValue> = pert
        .layer_outputs
        .iter()
        .map(|&n| g.value(n).clone())
        .collect();
    distortion_global(&clean_outs, &pert_outs, 1e-12)
}

/// Diagnose `lists` on an existing model and probe batch.
pub fn diagnose_model(
    model: &HatModel,
    batch: &DataSplit,
    lists: &[Vec<PerturbationSpec>],
    k: usize,
    thresholds_base: &RegimeThresholds,
    scope: &RngStream,
    time: &TimeState,
) -> Result<DiagnosticsReport> {
    let mut instability = 0usize;
    let mut nonfinite = false;

    // Spec-induced distortion at a fixed draw.
    let delta_global = match delta_for_lists(model, &batch.x, lists, &scope.child("delta"), time) {
        Ok(d) => d,
        Err(HatError::CoupledDiverged { .. }) => {
            instability += 1;
            f64::INFINITY
        }
        Err(e) => return Err(e),
    };

    // Distortion-matched additive reference.
    let (reference_sigma_r, matched) = if delta_global.is_finite() && delta_global > 1e-9 {
        let cal_cfg = CalibrationConfig {
            delta_target: delta_global,
            ..CalibrationConfig::default()
        };
        let scope_cal = scope.child("reference-calibration");
        let result = calibrate_strength(
            |s| {
                let ref_lists =
                    vec![vec![PerturbationSpec::Additive { sigma_r: s }]; model.layers.len()];
                delta_for_lists(model, &batch.x, &ref_lists, &scope_cal, time)
            },
            &cal_cfg,
        )?;
        (result.s_star, true)
    } else {
        (DEFAULT_REFERENCE_SIGMA_R, false)
    };

    let ref_lists =
        vec![vec![PerturbationSpec::Additive { sigma_r: reference_sigma_r }]; model.layers.len()];
    let mut ref_sampler = ModelGradientSampler {
        model,
        x: &batch.x,
        y: &batch.y,
        targets: None,
        lists: &ref_lists,
        scope: scope.child("reference-variance"),
        time: *time,
    };
    let ref_var = gradient_variance_tolerant(&mut ref_sampler, k);

    let mut thresholds = thresholds_base.clone();
    thresholds.reference_sigma_r = Some(reference_sigma_r);
    thresholds.reference_variance = Some(ref_var.variance);
    thresholds.t_var =
        thresholds.t_var_multiplier * ref_var.variance.max(f64::MIN_POSITIVE);
    let _ = matched;

    // Expectation consistency (K draws vs averaged weights).
    let (consistency_cosine, consistency_degenerate) = match expectation_consistency(
        model,
        &batch.x,
        &batch.y,
        None,
        lists,
        k,
        &scope.child("consistency"),
        time,
    ) {
        Ok(out) => (out.cosine, out.degenerate),
        Err(HatError::CoupledDiverged { .. }) => {
            instability += 1;
            (0.0, true)
        }
        Err(HatError::NonFinite { .. }) | Err(HatError::NonFiniteLoss { .. }) => {
            nonfinite = true;
            (0.0, true)
        }
        Err(e) => return Err(e),
    };

    // Gradient variance with per-draw fault capture.
    let mut sampler = ModelGradientSampler {
        model,
        x: &batch.x,
        y: &batch.y,
        targets: None,
        lists,
        scope: scope.child("variance"),
        time: *time,
    };
    let var = gradient_variance_tolerant(&mut sampler, k);
    instability += var.instability_events;
    nonfinite |= var.nonfinite_observed;

    // Sensitivity probe.
    let sens = match sensitivity_probe(
        model,
        &batch.x,
        &batch.y,
        None,
        lists,
        &scope.child("sensitivity"),
        time,
    ) {
        Ok(s) => s,
        Err(HatError::CoupledDiverged { .. }) => {
            instability += 1;
            crate::diagnostics::SensitivityOut {
                nonzero_fraction: 0.0,
                frozen_fraction: 0.0,
                grad_norm: 0.0,
            }
        }
        Err(e) => return Err(e),
    };

    let inputs = RegimeInputs {
        sensitivity_fraction: sens.nonzero_fraction,
        grad_variance: var.variance,
        frozen_fraction: sens.frozen_fraction,
        nonfinite_observed: nonfinite || instability > 0,
    };
    let regime = classify_regime(&inputs, &thresholds);

    Ok(DiagnosticsReport {
        consistency_cosine,
        consistency_degenerate,
        grad_variance: var.variance,
        sensitivity_fraction: sens.nonzero_fraction,
        frozen_fraction: sens.frozen_fraction,
        sensitivity_norm: sens.grad_norm,
        delta_global,
        regime,
        thresholds,
        instability_events: instability,
        nonfinite_observed: nonfinite,
    })
}

/// Diagnose a full experiment config: build the model (optionally pre-train
/// it clean), take the fixed probe batch, and measure the eval perturbation
/// list.
pub fn diagnose(cfg: &ExperimentConfig) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    let data = synth_dataset(
        cfg.dataset.kind,
        cfg.dataset.n,
        cfg.dataset.noise,
        cfg.master_seed,
    )?;
    let master = RngStream::new(cfg.master_seed, "experiment");
    let mut model = HatModel::mlp(
        &cfg.model.layer_sizes,
        &cfg.model.activations,
        &cfg.crossbar,
        &[],
        LossKind::CrossEntropy,
        &master.child("model"),
    )?;
    let mut time = TimeState::new(cfg.train.drift_horizon);
    if cfg.diagnose.pretrain_clean_steps > 0 {
        let mut tcfg = cfg.train.clone();
        tcfg.steps = Some(cfg.diagnose.pretrain_clean_steps);
        let mut trainer = Trainer::new(&tcfg, data.train.len(), master.child("train"))?;
        trainer.run(&mut model, &data.train.x, &data.train.y, |_, _| Ok(()))?;
        time = trainer.time;
    }
    let batch = data.train.head(cfg.diagnose.batch);
    let lists = vec![cfg.eval_perturbations.clone(); model.layers.len()];
    let thresholds = RegimeThresholds {
        t_sens: cfg.diagnose.t_sens,
        t_frozen: cfg.diagnose.t_frozen,
        t_var_multiplier: cfg.diagnose.t_var_multiplier,
        ..RegimeThresholds::default()
    };
    diagnose_model(
        &model,
        &batch,
        &lists,
        cfg.diagnose.k,
        &thresholds,
        &master.child("diagnose"),
        &time,
    )
}
