//! Batch experiment runner behind the `corrector-lab` binary.
//!
//! Every subcommand reads an [`ExperimentConfig`], writes its artifacts plus
//! `report.json` (results and checks, keyed by the config hash) and
//! `metadata.json` (the only file carrying a timestamp) into the output
//! directory. Exit codes: 0 all checks pass, 1 a check failed, 2 invalid
//! configuration, 3 solver non-convergence.

mod commands;
pub mod config;

pub use commands::{lemma2_scan, random_field, Lemma2Scan};
pub use config::{ConfigError, ExperimentConfig, RawConfig};

use crate::environment::RNG_ALGORITHM;
use crate::solver::SolverError;
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Variable capping the worker thread count; 0 or unset means automatic.
pub const THREADS_VAR: &str = "CORRECTOR_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "corrector-lab", version, about = "Harmonic correctors of random conductance environments")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file with key=value lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overrides the `out` key.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// First seed, overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra KEY=VALUE setting, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate and save environments.
    GenEnv,
    /// Solve the cell problem and save correctors and cocycles.
    Solve,
    /// Closedness, harmonicity, Poincaré batch and detailed balance.
    Verify,
    /// Sublinearity profile and full-period directional averages.
    Sublinearity,
    /// Oscillation decay fit of the corrector potential.
    Holder,
    /// Exhaustive nearest-multiple scan.
    #[command(name = "lemma2-scan")]
    Lemma2Scan,
    /// Random walk ensemble and martingale statistics.
    WalkClt,
    /// Effective conductivity tensor with energy bounds.
    SigmaEff,
    /// Compare CG against the dense direct solve.
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenEnv => "gen-env",
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Sublinearity => "sublinearity",
            Command::Holder => "holder",
            Command::Lemma2Scan => "lemma2-scan",
            Command::WalkClt => "walk-clt",
            Command::SigmaEff => "sigma-eff",
            Command::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } => EXIT_CONFIG,
            RunError::Solver(SolverError::NotConverged { .. }) => EXIT_NOT_CONVERGED,
            RunError::Solver(SolverError::TooLarge { .. } | SolverError::Tolerance(_)) => EXIT_CONFIG,
            RunError::Solver(_) => EXIT_CHECK_FAILED,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_CONFIG => "config",
            EXIT_NOT_CONVERGED => "not-converged",
            _ => "failure",
        }
    }

    /// Structured diagnostic printed on stderr.
    pub fn diagnostic(&self) -> Value {
        json!({ "status": "error", "kind": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() })
    }
}

/// One declared check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, relation: "<=", pass: value <= threshold }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, relation: ">=", pass: value >= threshold }
    }
}

pub(crate) struct Outcome {
    results: Value,
    checks: Vec<Check>,
}

/// Result of a successful run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub command: Command,
    pub out: PathBuf,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_OK
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

/// Reads the config file, then applies `--seed`, `--out` and overrides.
pub fn load_config(args: &Args) -> Result<ExperimentConfig, ConfigError> {
    let mut raw = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
            RawConfig::parse(&text)?
        }
        None => RawConfig::default(),
    };
    for o in &args.overrides {
        raw.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        raw.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        raw.set("out", &out.display().to_string())?;
    }
    ExperimentConfig::from_raw(&raw)
}

/// Sizes the global thread pool from [`THREADS_VAR`]; later calls are no-ops.
pub fn configure_threads() -> Result<(), ConfigError> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v.trim().parse::<usize>().map_err(|e| ConfigError::Value {
            key: THREADS_VAR.to_string(),
            value: v.clone(),
            reason: e.to_string(),
        })?,
        Err(_) => 0,
    };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

/// Runs one subcommand and writes its artifacts.
pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    std::fs::create_dir_all(&cfg.out).map_err(|source| RunError::Io { path: cfg.out.clone(), source })?;
    let mut ctx = commands::Ctx { cfg, out: cfg.out.clone(), artifacts: Vec::new() };
    let outcome = match command {
        Command::GenEnv => commands::gen_env(&mut ctx),
        Command::Solve => commands::solve(&mut ctx),
        Command::Verify => commands::verify(&mut ctx),
        Command::Sublinearity => commands::sublinearity(&mut ctx),
        Command::Holder => commands::holder(&mut ctx),
        Command::Lemma2Scan => commands::lemma2(&mut ctx),
        Command::WalkClt => commands::walk_clt(&mut ctx),
        Command::SigmaEff => commands::sigma_eff(&mut ctx),
        Command::OracleCheck => commands::oracle_check(&mut ctx),
    }?;
    let hash = cfg.hash();
    let pass = outcome.checks.iter().all(|c| c.pass);
    let report = json!({
        "command": command.name(),
        "config_sha256": hash,
        "seeds": cfg.seed_list(),
        "pass": pass,
        "checks": outcome.checks,
        "results": outcome.results,
    });
    let mut artifacts = std::mem::take(&mut ctx.artifacts);
    let write = |name: &str, value: &Value| -> Result<(), RunError> {
        let path = cfg.out.join(name);
        let mut text = serde_json::to_string_pretty(value).expect("json value");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })
    };
    write("report.json", &report)?;
    artifacts.push("report.json".to_string());
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let metadata = json!({
        "command": command.name(),
        "config_sha256": hash,
        "config": cfg.canonical(),
        "rng_algorithm": RNG_ALGORITHM,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "artifacts": artifacts,
        "timestamp_unix": timestamp,
    });
    write("metadata.json", &metadata)?;
    Ok(RunSummary { command, out: cfg.out.clone(), checks: outcome.checks, artifacts })
}

/// Full command-line entry point; returns the process exit code.
pub fn run(args: Args) -> i32 {
    let result = configure_threads()
        .and_then(|_| load_config(&args))
        .map_err(RunError::from)
        .and_then(|cfg| execute(args.command, &cfg));
    match result {
        Ok(summary) => {
            for c in &summary.checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {:e} {} {:e}", c.name, c.value, c.relation, c.threshold);
            }
            println!("{}: {} artifacts in {}", summary.command.name(), summary.artifacts.len(), summary.out.display());
            summary.exit_code()
        }
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}
