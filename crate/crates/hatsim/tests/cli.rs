//! CLI contract: subcommands, flags, exit codes (0 success, 2 divergence,
//! 64 usage), and emitted file formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hatsim::experiment::config::{ExperimentConfig, SweepConfig};
use hatsim::perturb::PerturbationSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hatsim"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.layer_sizes = vec![2, 8, 2];
    cfg.dataset.n = 400;
    cfg.train.steps = Some(60);
    cfg.train.batch_size = 64;
    cfg.crossbar.array_size = 8;
    cfg.diagnose.k = 16;
    cfg.diagnose.batch = 32;
    cfg.eval.n_noise_samples = 3;
    cfg.master_seed = 3;
    cfg.train_perturbations = vec![PerturbationSpec::Additive { sigma_r: 1e-6 }];
    cfg.eval_perturbations = vec![PerturbationSpec::Additive { sigma_r: 1e-6 }];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&[]).status.code(), Some(64));
    assert_eq!(run(&["run"]).status.code(), Some(64), "missing --config");
    assert_eq!(run(&["no-such-command"]).status.code(), Some(64));
    // calibrate without --target is a usage error.
    assert_eq!(
        run(&["calibrate", "--config", "x.json"]).status.code(),
        Some(64)
    );
    // Bad dataset kind is rejected at parse time.
    assert_eq!(
        run(&["synth-data", "--kind", "bogus"]).status.code(),
        Some(64)
    );
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_config_file_is_an_error_not_usage() {
    let out = run(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_data_writes_deterministic_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let st = run(&[
            "synth-data",
            "--kind",
            "rings",
            "--n",
            "200",
            "--noise",
            "0.05",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(st.status.code(), Some(0));
    }
    for name in ["train.csv", "val.csv", "test.csv", "meta.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} not deterministic");
    }
    let train = std::fs::read_to_string(out_a.join("train.csv")).unwrap();
    assert!(train.starts_with("x0,x1,label"));
    assert_eq!(train.lines().count(), 141); // header + 70% of 200
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["kind"], "rings");
    assert!(meta["artifact_version"].is_string());
}

#[test]
fn run_emits_record_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());
    let out_dir = dir.path().join("out");
    let st = run(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(0), "{:?}", st);

    let record: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("run_record.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(record["status"], "ok");
    assert!(record["config_hash"].as_str().unwrap().len() == 64);
    assert!(record["artifact_version"].is_string());
    assert!(record["compensated"]["accuracy_mean"].is_number());
    assert!(record["uncompensated"]["accuracy_mean"].is_number());
    assert!(record["diagnostics"]["regime"].is_string());

    let trace = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,task_loss,total_loss,grad_norm"));
    assert_eq!(trace.lines().count(), 61); // header + 60 steps
    let epochs = std::fs::read_to_string(out_dir.join("epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,train_acc,val_acc"));
}

#[test]
fn run_rerun_reproduces_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());
    let mut records = Vec::new();
    for sub in ["r1", "r2"] {
        let out_dir = dir.path().join(sub);
        let st = run(&[
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(st.status.code(), Some(0));
        let trace = std::fs::read(out_dir.join("trace.csv")).unwrap();
        let rec: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("run_record.json")).unwrap(),
        )
        .unwrap();
        records.push((trace, rec));
    }
    assert_eq!(records[0].0, records[1].0, "trace.csv differs across reruns");
    assert_eq!(
        records[0].1["compensated"], records[1].1["compensated"],
        "final accuracies differ across reruns"
    );
    assert_eq!(records[0].1["config_hash"], records[1].1["config_hash"]);
}

#[test]
fn seed_flag_overrides_config_hash_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());
    let out_dir = dir.path().join("out");
    let st = run(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(st.status.code(), Some(0));
    let rec: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("run_record.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(rec["master_seed"], 99);
}

#[test]
fn divergence_exits_2_with_failure_record() {
    let mut cfg = tiny_config();
    cfg.train.learning_rate = 1e9;
    cfg.train.cosine_schedule = false;
    cfg.train.steps = Some(400);
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let st = run(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(2), "{:?}", st);
    let rec: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("run_record.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(rec["status"], "diverged");
    assert!(rec["diverged_step"].is_number());
}

#[test]
fn sweep_jobs_equivalence_and_header() {
    let mut cfg = tiny_config();
    cfg.sweep = Some(SweepConfig {
        axis: "sigma_r".into(),
        values: vec![0.0, 1e-6, 1e-5],
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &cfg);
    let seq = dir.path().join("seq");
    let par = dir.path().join("par");
    let st1 = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        seq.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    assert_eq!(st1.status.code(), Some(0), "{:?}", st1);
    let st2 = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        par.to_str().unwrap(),
        "--jobs",
        "3",
    ]);
    assert_eq!(st2.status.code(), Some(0));
    let a = std::fs::read(seq.join("sweep.csv")).unwrap();
    let b = std::fs::read(par.join("sweep.csv")).unwrap();
    assert_eq!(a, b, "parallel sweep must reproduce sequential bytes");
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with(
        "axis_value,compensated_acc,uncompensated_acc,grad_norm_mean,grad_norm_std,grad_variance,frozen_fraction,regime,status"
    ));
    assert_eq!(text.lines().count(), 4); // header + 3 axis values
    assert!(seq.join("sweep_summary.json").exists());
    assert!(seq.join("point_002/run_record.json").exists());
}

#[test]
fn sweep_single_value_rejected() {
    let mut cfg = tiny_config();
    cfg.sweep = Some(SweepConfig {
        axis: "sigma_r".into(),
        values: vec![0.0],
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &cfg);
    let st = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn diagnose_emits_report_with_required_keys() {
    let mut cfg = tiny_config();
    cfg.eval_perturbations = vec![PerturbationSpec::Additive { sigma_r: 1e-7 }];
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let st = run(&[
        "diagnose",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(0), "{:?}", st);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("diagnostics.json")).unwrap(),
    )
    .unwrap();
    for key in [
        "consistency_cosine",
        "grad_variance",
        "sensitivity_fraction",
        "frozen_fraction",
        "delta_global",
        "regime",
        "thresholds",
        "config_hash",
        "artifact_version",
    ] {
        assert!(report.get(key).is_some(), "missing key {key}");
    }
    assert_eq!(report["regime"], "I");
}

#[test]
fn calibrate_emits_history() {
    let mut cfg = tiny_config();
    cfg.train_perturbations = vec![];
    cfg.eval_perturbations = vec![PerturbationSpec::IrDropSimplified { beta: 1.0 }];
    cfg.diagnose.pretrain_clean_steps = 60;
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let st = run(&[
        "calibrate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--target",
        "0.02",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(0), "{:?}", st);
    let result: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("calibration.json")).unwrap(),
    )
    .unwrap();
    assert!(result["s_star"].is_number());
    assert!(result["history"].as_array().unwrap().len() <= 20);
}

#[test]
fn calibrate_without_ir_drop_spec_fails() {
    let cfg = tiny_config(); // additive eval specs only
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &cfg);
    let st = run(&[
        "calibrate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--target",
        "0.05",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn shipped_config_templates_load_and_validate() {
    let configs_dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&configs_dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            ExperimentConfig::load(&path)
                .unwrap_or_else(|e| panic!("{} failed to load: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 6, "expected the shipped config templates, saw {seen}");
}
