//! Command-line front end.
//!
//! Exit codes: 0 success, 2 training divergence, 64 usage error, 1 any other
//! failure.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::HatError;
use crate::experiment::config::ExperimentConfig;
use crate::experiment::dataset::{synth_dataset, DatasetKind};
use crate::experiment::{diagnose, runner};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_ERROR: i32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "hatsim",
    version,
    about = "Crossbar non-ideality simulation and hardware-aware training diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train compensated and uncompensated models and evaluate both.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One run per sweep-axis value, plus a combined CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel sweep points (results identical to sequential).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Measure the three learnability diagnostics and classify the regime.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distortion-matched strength search for the eval IR-drop spec.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Target global distortion (e.g. 0.05).
        #[arg(long)]
        target: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic dataset and write CSV splits.
    SynthData {
        /// blobs | rings | xor
        #[arg(long, value_parser = parse_kind)]
        kind: DatasetKind,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<DatasetKind, String> {
    s.parse().map_err(|e: HatError| e.to_string())
}

fn load_config(path: &std::path::Path, seed: Option<u64>) -> crate::error::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    kind: &'a str,
    n: usize,
    noise: f64,
    seed: u64,
    feature_mean: &'a [f64],
    feature_std: &'a [f64],
    artifact_version: &'a str,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                EXIT_OK
            } else {
                EXIT_USAGE
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cli: Cli) -> crate::error::Result<i32> {
    match cli.cmd {
        Cmd::Run { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let record = runner::run(&cfg, &out)?;
            if record.diverged() {
                eprintln!(
                    "training diverged at step {:?}: {}",
                    record.diverged_step,
                    record.divergence_detail.as_deref().unwrap_or("")
                );
                return Ok(EXIT_DIVERGED);
            }
            println!(
                "run ok: compensated {:.4} / uncompensated {:.4} (record: {})",
                record.compensated.as_ref().map_or(f64::NAN, |e| e.accuracy_mean),
                record.uncompensated.as_ref().map_or(f64::NAN, |e| e.accuracy_mean),
                out.join("run_record.json").display()
            );
            Ok(EXIT_OK)
        }
        Cmd::Sweep {
            config,
            out,
            seed,
            jobs,
        } => {
            let cfg = load_config(&config, seed)?;
            let summary = runner::sweep(&cfg, &out, jobs.max(1))?;
            let diverged = summary.rows.iter().any(|r| r.status == "diverged");
            println!(
                "sweep ok: {} points on axis `{}` ({})",
                summary.rows.len(),
                summary.axis,
                out.join("sweep.csv").display()
            );
            Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
        }
        Cmd::Diagnose { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let report = diagnose(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let mut obj = serde_json::to_value(&report)?;
            if let serde_json::Value::Object(map) = &mut obj {
                map.insert(
                    "config_hash".into(),
                    serde_json::Value::String(crate::experiment::config_hash(&cfg)),
                );
                map.insert(
                    "artifact_version".into(),
                    serde_json::Value::String(crate::ARTIFACT_VERSION.into()),
                );
            }
            let path = out.join("diagnostics.json");
            std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&obj)?))?;
            println!(
                "regime {} (variance {:.3e}, sensitivity {:.3}, frozen {:.3}) → {}",
                report.regime,
                report.grad_variance,
                report.sensitivity_fraction,
                report.frozen_fraction,
                path.display()
            );
            Ok(EXIT_OK)
        }
        Cmd::Calibrate {
            config,
            target,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let result = runner::calibrate(&cfg, target, &out)?;
            println!(
                "calibrated s* = {} (δ {} after {} trials, converged: {}) → {}",
                result.s_star,
                result.achieved_delta,
                result.trials_used,
                result.converged,
                out.join("calibration.json").display()
            );
            Ok(EXIT_OK)
        }
        Cmd::SynthData {
            kind,
            n,
            noise,
            seed,
            out,
        } => {
            let data = synth_dataset(kind, n, noise, seed)?;
            let kind_name = format!("{kind:?}").to_lowercase();
            let meta = SynthMeta {
                kind: &kind_name,
                n,
                noise,
                seed,
                feature_mean: &data.feature_mean,
                feature_std: &data.feature_std,
                artifact_version: crate::ARTIFACT_VERSION,
            };
            runner::write_dataset(&data, &meta, &out)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test) to {}",
                n,
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
            Ok(EXIT_OK)
        }
    }
}

impl From<HatError> for i32 {
    fn from(e: HatError) -> Self {
        match e {
            HatError::NonFiniteLoss { .. } => EXIT_DIVERGED,
            _ => EXIT_ERROR,
        }
    }
}
