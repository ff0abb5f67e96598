//! Run and sweep orchestration with JSON/CSV emission.
//!
//! A `run` trains the compensated model (training-time injection), trains an
//! uncompensated twin clean under the same seed, evaluates both under the
//! evaluation perturbations, diagnoses the trained model, and writes
//! `run_record.json`, `trace.csv`, and `epochs.csv`. A `sweep` repeats that
//! per axis value with derived seeds and writes a combined `sweep.csv`.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{DiagnosticsReport, GradientTrace, TraceSummary};
use crate::error::{HatError, Result};
use crate::experiment::config::{config_hash, ExperimentConfig};
use crate::experiment::dataset::{synth_dataset, Dataset};
use crate::experiment::diagnose::diagnose_model;
use crate::hat::{evaluate, EvalReport, HatModel, LossKind, TimeState, Trainer};
use crate::perturb::PerturbationSpec;
use crate::rng::RngStream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub delta_global: f64,
    pub n_draws: usize,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            accuracy_mean: r.accuracy_mean,
            accuracy_std: r.accuracy_std,
            delta_global: r.delta_global_mean,
            n_draws: r.n_draws,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub artifact_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// "ok" or "diverged".
    pub status: String,
    pub diverged_step: Option<usize>,
    pub divergence_detail: Option<String>,
    pub epochs: Vec<EpochRow>,
    pub compensated: Option<EvalSummary>,
    pub uncompensated: Option<EvalSummary>,
    pub grad_trace: TraceSummary,
    pub drift_collapsed_steps: usize,
    pub diagnostics: Option<DiagnosticsReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.status == "diverged"
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Execute one experiment into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let hash = config_hash(cfg);
    let data = synth_dataset(
        cfg.dataset.kind,
        cfg.dataset.n,
        cfg.dataset.noise,
        cfg.master_seed,
    )?;
    let master = RngStream::new(cfg.master_seed, "experiment");
    let eval_lists = |model: &HatModel| -> Vec<Vec<PerturbationSpec>> {
        vec![cfg.eval_perturbations.clone(); model.layers.len()]
    };

    // Compensated model: training-time injection.
    let mut model = HatModel::mlp(
        &cfg.model.layer_sizes,
        &cfg.model.activations,
        &cfg.crossbar,
        &cfg.train_perturbations,
        LossKind::CrossEntropy,
        &master.child("model"),
    )?;
    let mut trainer = Trainer::new(&cfg.train, data.train.len(), master.child("train"))?;
    let mut epochs: Vec<EpochRow> = Vec::new();
    let train_lists = vec![cfg.train_perturbations.clone(); model.layers.len()];
    let eval_l = eval_lists(&model);
    let epoch_scope = master.child("epoch-eval");

    let train_result = {
        let data_ref = &data;
        let epochs_ref = &mut epochs;
        let train_lists = &train_lists;
        let eval_l = &eval_l;
        let epoch_scope = &epoch_scope;
        trainer.run(
            &mut model,
            &data.train.x,
            &data.train.y,
            |epoch, m: &mut HatModel| {
                let t = TimeState {
                    step: epoch,
                    fixed_horizon: cfg.train.drift_horizon,
                };
                let train_eval = evaluate(
                    m,
                    &data_ref.train.x,
                    &data_ref.train.y,
                    Some(train_lists),
                    &epoch_scope.child(&format!("train/{epoch}")),
                    &t,
                    1,
                )?;
                let val_eval = evaluate(
                    m,
                    &data_ref.val.x,
                    &data_ref.val.y,
                    Some(eval_l),
                    &epoch_scope.child(&format!("val/{epoch}")),
                    &t,
                    2,
                )?;
                epochs_ref.push(EpochRow {
                    epoch,
                    train_acc: train_eval.accuracy_mean,
                    val_acc: val_eval.accuracy_mean,
                });
                Ok(())
            },
        )
    };

    let mut trace = GradientTrace::new(64);
    for rec in &trainer.records {
        trace.record(rec.grad_norm);
    }
    let drift_collapsed_steps = trainer.records.iter().filter(|r| r.drift_collapsed).count();

    let mut record = RunRecord {
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
        config_hash: hash,
        master_seed: cfg.master_seed,
        status: "ok".into(),
        diverged_step: None,
        divergence_detail: None,
        epochs,
        compensated: None,
        uncompensated: None,
        grad_trace: trace.summary(),
        drift_collapsed_steps,
        diagnostics: None,
        wall_clock_secs: 0.0,
    };

    match train_result {
        Ok(()) => {}
        Err(HatError::NonFiniteLoss { step, detail }) => {
            record.status = "diverged".into();
            record.diverged_step = Some(step);
            record.divergence_detail = Some(detail);
            record.wall_clock_secs = started.elapsed().as_secs_f64();
            write_run_outputs(out_dir, &record, &trainer)?;
            return Ok(record);
        }
        Err(e) => return Err(e),
    }

    // Uncompensated twin: same init and data order, no training-time specs.
    let mut model_u = HatModel::mlp(
        &cfg.model.layer_sizes,
        &cfg.model.activations,
        &cfg.crossbar,
        &[],
        LossKind::CrossEntropy,
        &master.child("model"),
    )?;
    let mut trainer_u = Trainer::new(&cfg.train, data.train.len(), master.child("train"))?;
    match trainer_u.run(&mut model_u, &data.train.x, &data.train.y, |_, _| Ok(())) {
        Ok(()) => {}
        Err(HatError::NonFiniteLoss { step, detail }) => {
            record.status = "diverged".into();
            record.diverged_step = Some(step);
            record.divergence_detail = Some(format!("uncompensated twin: {detail}"));
            record.wall_clock_secs = started.elapsed().as_secs_f64();
            write_run_outputs(out_dir, &record, &trainer)?;
            return Ok(record);
        }
        Err(e) => return Err(e),
    }

    // Final evaluation under the eval specs; both models see the same draws.
    let eval_scope = master.child("eval");
    let comp = evaluate(
        &model,
        &data.test.x,
        &data.test.y,
        Some(&eval_l),
        &eval_scope,
        &trainer.time,
        cfg.eval.n_noise_samples,
    )?;
    let uncomp = evaluate(
        &model_u,
        &data.test.x,
        &data.test.y,
        Some(&eval_l),
        &eval_scope,
        &trainer_u.time,
        cfg.eval.n_noise_samples,
    )?;
    record.compensated = Some(EvalSummary::from(&comp));
    record.uncompensated = Some(EvalSummary::from(&uncomp));

    // Diagnostics of the trained compensated model under the eval specs.
    let batch = data.train.head(cfg.diagnose.batch);
    let thresholds = crate::diagnostics::RegimeThresholds {
        t_sens: cfg.diagnose.t_sens,
        t_frozen: cfg.diagnose.t_frozen,
        t_var_multiplier: cfg.diagnose.t_var_multiplier,
        ..Default::default()
    };
    record.diagnostics = Some(diagnose_model(
        &model,
        &batch,
        &eval_l,
        cfg.diagnose.k,
        &thresholds,
        &master.child("diagnose"),
        &trainer.time,
    )?);

    record.wall_clock_secs = started.elapsed().as_secs_f64();
    write_run_outputs(out_dir, &record, &trainer)?;
    Ok(record)
}

fn write_run_outputs(out_dir: &Path, record: &RunRecord, trainer: &Trainer) -> Result<()> {
    write_json(&out_dir.join("run_record.json"), record)?;

    let mut w = csv::Writer::from_path(out_dir.join("trace.csv"))?;
    w.write_record(["step", "task_loss", "total_loss", "grad_norm"])?;
    for rec in &trainer.records {
        w.write_record([
            rec.step.to_string(),
            format!("{}", rec.task_loss),
            format!("{}", rec.total_loss),
            format!("{}", rec.grad_norm),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("epochs.csv"))?;
    w.write_record(["epoch", "train_acc", "val_acc"])?;
    for row in &record.epochs {
        w.write_record([
            row.epoch.to_string(),
            format!("{}", row.train_acc),
            format!("{}", row.val_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub status: String,
    pub compensated_acc: f64,
    pub uncompensated_acc: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_std: f64,
    pub grad_variance: f64,
    pub frozen_fraction: f64,
    pub regime: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    pub config_hash: String,
    pub artifact_version: String,
}

/// Run one experiment per axis value with derived seeds
/// (`master_seed ⊕ index`); failures are recorded and the sweep continues.
/// `jobs > 1` runs points in parallel — each point owns a derived seed and an
/// isolated output directory, so results are identical to sequential runs.
pub fn sweep(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<SweepSummary> {
    cfg.validate()?;
    let sweep_cfg = cfg
        .sweep
        .clone()
        .ok_or_else(|| HatError::InvalidConfig("config carries no sweep block".into()))?;
    if sweep_cfg.values.len() < 2 {
        return Err(HatError::InvalidConfig(
            "sweep needs at least 2 axis values".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;

    let points: Vec<(usize, f64)> = sweep_cfg.values.iter().copied().enumerate().collect();
    let mut results: Vec<Option<SweepRow>> = vec![None; points.len()];

    let run_point = |i: usize, v: f64| -> SweepRow {
        let mut point_cfg = cfg.clone();
        point_cfg.sweep = None;
        point_cfg.master_seed = cfg.master_seed ^ (i as u64);
        let sub = out_dir.join(format!("point_{i:03}"));
        let outcome = point_cfg
            .apply_axis(&sweep_cfg.axis, v)
            .and_then(|()| run(&point_cfg, &sub));
        match outcome {
            Ok(rec) => {
                let diag = rec.diagnostics.as_ref();
                SweepRow {
                    axis_value: v,
                    status: rec.status.clone(),
                    compensated_acc: rec
                        .compensated
                        .as_ref()
                        .map_or(f64::NAN, |e| e.accuracy_mean),
                    uncompensated_acc: rec
                        .uncompensated
                        .as_ref()
                        .map_or(f64::NAN, |e| e.accuracy_mean),
                    grad_norm_mean: rec.grad_trace.mean,
                    grad_norm_std: rec.grad_trace.std,
                    grad_variance: diag.map_or(f64::NAN, |d| d.grad_variance),
                    frozen_fraction: diag.map_or(f64::NAN, |d| d.frozen_fraction),
                    regime: diag.map_or("-".into(), |d| d.regime.to_string()),
                }
            }
            Err(e) => SweepRow {
                axis_value: v,
                status: format!("failed: {e}"),
                compensated_acc: f64::NAN,
                uncompensated_acc: f64::NAN,
                grad_norm_mean: f64::NAN,
                grad_norm_std: f64::NAN,
                grad_variance: f64::NAN,
                frozen_fraction: f64::NAN,
                regime: "-".into(),
            },
        }
    };

    if jobs <= 1 {
        for &(i, v) in &points {
            results[i] = Some(run_point(i, v));
        }
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<Vec<(usize, f64)>> = points
                .chunks(points.len().div_ceil(jobs))
                .map(<[(usize, f64)]>::to_vec)
                .collect();
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    let run_point = &run_point;
                    scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|(i, v)| (i, run_point(i, v)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, row) in h.join().expect("sweep worker panicked") {
                    results[i] = Some(row);
                }
            }
        });
    }

    let rows: Vec<SweepRow> = results.into_iter().map(|r| r.expect("all points ran")).collect();
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record([
        "axis_value",
        "compensated_acc",
        "uncompensated_acc",
        "grad_norm_mean",
        "grad_norm_std",
        "grad_variance",
        "frozen_fraction",
        "regime",
        "status",
    ])?;
    for row in &rows {
        w.write_record([
            format!("{}", row.axis_value),
            format!("{}", row.compensated_acc),
            format!("{}", row.uncompensated_acc),
            format!("{}", row.grad_norm_mean),
            format!("{}", row.grad_norm_std),
            format!("{}", row.grad_variance),
            format!("{}", row.frozen_fraction),
            row.regime.clone(),
            row.status.clone(),
        ])?;
    }
    w.flush()?;

    let summary = SweepSummary {
        axis: sweep_cfg.axis,
        rows,
        config_hash: config_hash(cfg),
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
    };
    write_json(&out_dir.join("sweep_summary.json"), &summary)?;
    Ok(summary)
}

/// Calibrate the strength of the (single) IR-drop spec in the eval list to a
/// target global distortion, on a clean model optionally pre-trained per the
/// diagnose block.
pub fn calibrate(
    cfg: &ExperimentConfig,
    target: f64,
    out_dir: &Path,
) -> Result<crate::calibration::CalibrationResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let idx = cfg
        .eval_perturbations
        .iter()
        .position(|s| {
            matches!(
                s,
                PerturbationSpec::IrDropSimplified { .. } | PerturbationSpec::IrDropCoupled { .. }
            )
        })
        .ok_or_else(|| {
            HatError::InvalidConfig(
                "calibrate requires an IR-drop spec in eval_perturbations".into(),
            )
        })?;

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

    let cal_cfg = crate::calibration::CalibrationConfig {
        delta_target: target,
        ..Default::default()
    };
    let subset = data.train.head(cal_cfg.samples);
    let scope = master.child("calibrate");
    let result = calibrate_strength_on_model(
        &model, &subset.x, &cfg.eval_perturbations, idx, &cal_cfg, &scope, &time,
    )?;
    write_json(&out_dir.join("calibration.json"), &result)?;
    Ok(result)
}

/// Distortion reported when the coupled fixed point diverges during a
/// calibration trial: the strength is un-simulable, so the search treats it
/// as far past the target and halves.
pub const DIVERGED_DELTA_SENTINEL: f64 = 1e9;

/// Strength search over one spec slot of an eval list.
pub fn calibrate_strength_on_model(
    model: &HatModel,
    x: &crate::tensor::TensorValue,
    eval_specs: &[PerturbationSpec],
    spec_idx: usize,
    cal_cfg: &crate::calibration::CalibrationConfig,
    scope: &RngStream,
    time: &TimeState,
) -> Result<crate::calibration::CalibrationResult> {
    crate::calibration::calibrate_strength(
        |s| {
            let mut specs = eval_specs.to_vec();
            if !specs[spec_idx].set_strength(s) {
                return Err(HatError::InvalidConfig(format!(
                    "spec `{}` has no strength field",
                    specs[spec_idx].name()
                )));
            }
            let lists = vec![specs; model.layers.len()];
            match crate::experiment::diagnose::delta_for_lists(model, x, &lists, scope, time) {
                Ok(d) => Ok(d),
                Err(HatError::CoupledDiverged { .. }) => Ok(DIVERGED_DELTA_SENTINEL),
                Err(e) => Err(e),
            }
        },
        cal_cfg,
    )
}

/// Write dataset splits as CSV plus a metadata JSON (synth-data subcommand).
pub fn write_dataset(data: &Dataset, meta: &impl Serialize, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for (name, split) in [
        ("train", &data.train),
        ("val", &data.val),
        ("test", &data.test),
    ] {
        let mut w = csv::Writer::from_path(out_dir.join(format!("{name}.csv")))?;
        w.write_record(["x0", "x1", "label"])?;
        for r in 0..split.len() {
            w.write_record([
                format!("{}", split.x.at(r, 0)),
                format!("{}", split.x.at(r, 1)),
                split.y[r].to_string(),
            ])?;
        }
        w.flush()?;
    }
    write_json(&out_dir.join("meta.json"), meta)
}
