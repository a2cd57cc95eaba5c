//! Command-line entry points: single runs, parameter sweeps, self-checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{metrics_csv, run_experiment, ExperimentResult};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "fedcova", version, about = "Covariance-aware federated learning under noisy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics, manifest and snapshots.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per value of a single parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of eps_sq, alpha, feature_dim.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0.1,1,4.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        /// Run the sweep points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Check the numerical core against independent oracles.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Record of what a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
    pub outputs: Vec<String>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Writes every artifact of a finished run into `out` and returns the
/// file names, in the order written.
pub fn write_run_outputs(config: &ExperimentConfig, result: &ExperimentResult, out: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out)?;
    let mut names = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        fs::write(out.join(name), bytes)?;
        names.push(name.to_string());
        Ok(())
    };
    put("config.toml", config.to_toml_string()?.into_bytes())?;
    put("metrics.csv", metrics_csv(&result.metrics).into_bytes())?;
    let mut buf = Vec::new();
    result.final_encoder.write_snapshot(&mut buf)?;
    put("encoder.bin", buf)?;
    if let Some(head) = &result.final_head {
        let mut buf = Vec::new();
        head.write_snapshot(&mut buf)?;
        put("head.bin", buf)?;
    }
    if let Some(cls) = &result.final_classifier {
        let mut buf = Vec::new();
        cls.write_snapshot(&mut buf)?;
        put("classifier.bin", buf)?;
    }
    Ok(names)
}

fn write_manifest(config: &ExperimentConfig, started: u128, mut outputs: Vec<String>, out: &Path) -> Result<RunManifest> {
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash_hex(),
        started_at_unix_ms: started,
        finished_at_unix_ms: now_ms(),
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(manifest)
}

pub fn cmd_run(config_path: &Path, out: &Path) -> Result<RunManifest> {
    let started = now_ms();
    let config = ExperimentConfig::load(config_path)?;
    let result = run_experiment(&config)?;
    let outputs = write_run_outputs(&config, &result, out)?;
    write_manifest(&config, started, outputs, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    EpsSq,
    Alpha,
    FeatureDim,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::EpsSq => "eps_sq",
            SweepParam::Alpha => "alpha",
            SweepParam::FeatureDim => "feature_dim",
        }
    }

    fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::EpsSq => config.eps_sq = value,
            SweepParam::Alpha => config.alpha = value,
            SweepParam::FeatureDim => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::ConfigParse(format!("field `feature_dim`: {value} is not a positive integer")));
                }
                config.model.feature_dim = value as usize;
            }
        }
        config.validate()
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps_sq" => Ok(SweepParam::EpsSq),
            "alpha" => Ok(SweepParam::Alpha),
            "feature_dim" => Ok(SweepParam::FeatureDim),
            other => Err(Error::ConfigParse(format!(
                "unknown sweep parameter `{other}` (expected eps_sq, alpha or feature_dim)"
            ))),
        }
    }
}

pub fn parse_values(csv: &str) -> Result<Vec<f64>> {
    let values = csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::ConfigParse(format!("sweep value `{s}` is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::ConfigParse("no sweep values given".into()));
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub final_accuracy: f64,
    pub last5_mean_accuracy: f64,
    pub dir: PathBuf,
}

pub const SWEEP_HEADER: &str = "param,value,final_accuracy,last5_mean_accuracy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.param.as_str(), r.value, r.final_accuracy, r.last5_mean_accuracy);
    }
    out
}

/// Runs the base config once per value; each point gets its own
/// subdirectory, and `summary.csv` lists the points in input order.
pub fn sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64], out: &Path, parallel: bool) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            param.apply(&mut c, v)?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let point = |(value, config): &(f64, ExperimentConfig)| -> Result<SweepRow> {
        let started = now_ms();
        let dir = out.join(format!("{}={value}", param.as_str()));
        let result = run_experiment(config)?;
        let outputs = write_run_outputs(config, &result, &dir)?;
        write_manifest(config, started, outputs, &dir)?;
        Ok(SweepRow {
            param,
            value: *value,
            final_accuracy: result.final_accuracy().unwrap_or(f64::NAN),
            last5_mean_accuracy: result.last_k_mean_accuracy(5).unwrap_or(f64::NAN),
            dir,
        })
    };
    let rows = if parallel {
        configs.par_iter().map(point).collect::<Result<Vec<_>>>()?
    } else {
        configs.iter().map(point).collect::<Result<Vec<_>>>()?
    };
    fs::write(out.join("summary.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

pub fn cmd_sweep(config_path: &Path, param: &str, values: &str, out: &Path, parallel: bool) -> Result<Vec<SweepRow>> {
    let base = ExperimentConfig::load(config_path)?;
    sweep(&base, param.parse()?, &parse_values(values)?, out, parallel)
}

/// Runs the oracle suite; returns whether every check passed and the table.
pub fn cmd_verify(seed: u64) -> (bool, String) {
    let outcomes = verify::run_all(seed);
    (outcomes.iter().all(|o| o.passed), verify::report(&outcomes))
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out).map(|m| {
            println!("wrote {} files to {} (config {})", m.outputs.len(), out.display(), &m.config_hash[..12]);
        }),
        Command::Sweep { config, param, values, out, parallel } => {
            cmd_sweep(&config, &param, &values, &out, parallel).map(|rows| print!("{}", sweep_csv(&rows)))
        }
        Command::Verify { seed } => {
            // The fixtures exercise fallbacks on purpose; their warnings are noise here.
            log::set_max_level(log::LevelFilter::Error);
            let (ok, table) = cmd_verify(seed);
            print!("{table}");
            return if ok { 0 } else { 1 };
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
