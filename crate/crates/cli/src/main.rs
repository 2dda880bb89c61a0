use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cgt_core::harness::{self, ExperimentConfig, SweepResult};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

/// Compressed gradient tracking simulator.
#[derive(Parser)]
#[command(name = "cgt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, env = "CGT_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one cell of the config (the first unless --cell is given).
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cell: Option<String>,
    },
    /// Run every cell of the config.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Step-size bounds for a cell's compressor and the rate certificate at them.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cell: Option<String>,
    },
    /// Transition matrix and rate certificate at a cell's own step sizes.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cell: Option<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

/// Pretty-prints `value` on stdout; a closed pipe is not an error.
fn emit(value: &Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.context("writing to stdout"),
    }
}

fn fmt_bits(b: Option<u64>) -> Value {
    b.map_or(Value::Null, Value::from)
}

fn summarize(result: &SweepResult) -> Value {
    let tol = result.report_tol;
    let cells: Vec<Value> = result
        .cells
        .iter()
        .map(|cell| {
            let runs: Vec<Value> = cell
                .runs
                .iter()
                .map(|run| match &run.trace {
                    Some(t) => json!({
                        "repeat": run.repeat,
                        "seed": run.seed,
                        "status": "ok",
                        "iterations": t.last().k,
                        "final_omega_o": t.last().omega_o,
                        "iterations_to_tol": t.iterations_to_tolerance(tol),
                        "bits_to_tol": fmt_bits(t.bits_to_tolerance(tol)),
                    }),
                    None => json!({
                        "repeat": run.repeat,
                        "seed": run.seed,
                        "status": "diverged",
                        "error": run.error,
                    }),
                })
                .collect();
            json!({
                "label": cell.label,
                "algorithm": cell.algorithm,
                "compressor": cell.compressor,
                "runs": runs,
            })
        })
        .collect();
    json!({
        "name": result.name,
        "output_dir": result.output_dir,
        "instance_digest": result.instance_digest,
        "report_tol": tol,
        "cells": cells,
    })
}

/// Failure that has already been reported on stdout but must set the exit code.
#[derive(Debug)]
struct Diverged(Vec<String>);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "runs diverged in: {}", self.0.join(", "))
    }
}

impl std::error::Error for Diverged {}

fn report_sweep(result: &SweepResult) -> Result<()> {
    emit(&summarize(result))?;
    let diverged: Vec<String> = result
        .cells
        .iter()
        .filter(|c| c.runs.iter().any(|r| r.trace.is_none()))
        .map(|c| c.label.clone())
        .collect();
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(Diverged(diverged).into())
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, cell } => {
            let cfg = load(&common)?;
            let label = match cell {
                Some(l) => l,
                None => cfg.resolve()?[0].label.clone(),
            };
            report_sweep(&harness::run_cells(&cfg, Some(&label))?)
        }
        Command::Sweep { common } => report_sweep(&harness::run_experiment(&load(&common)?)?),
        Command::Bounds { common, cell } => {
            let theory = harness::cell_theory(&load(&common)?, cell.as_deref())?;
            let report = harness::bounds_report(&theory)?;
            emit(&serde_json::to_value(report)?)
        }
        Command::Certify { common, cell } => {
            let theory = harness::cell_theory(&load(&common)?, cell.as_deref())?;
            let report = harness::certify_report(&theory)?;
            emit(&serde_json::to_value(report)?)
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use cgt_core::Error as E;
    if err.downcast_ref::<Diverged>().is_some() {
        return "divergence";
    }
    match err.downcast_ref::<E>() {
        Some(E::Divergence { .. }) => "divergence",
        Some(E::InvalidConfig(_) | E::InvalidCompressor(_) | E::Parse { .. }) => "config",
        Some(E::Io { .. }) => "io",
        Some(_) => "invalid_input",
        None => "other",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = error_kind(&err);
            let body = json!({ "error": { "kind": kind, "message": format!("{err:#}") } });
            eprintln!("{body}");
            if kind == "divergence" {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
