//! Experiment orchestration.
//!
//! An experiment is one problem instance and one graph, shared by every cell
//! of a sweep, and a list of cells (algorithm, compressor, step sizes). Each
//! cell runs `repeats` times with independent initial points and compression
//! randomness. Output layout under `output_dir`:
//!
//! ```text
//! config.resolved.toml     every default filled in, compressors canonical
//! topology.json            the graph
//! problem.json             the ridge instance
//! traces/<cell>_seed<r>.csv
//! summary.csv              one row per (cell, repeat)
//! plot/<cell>.dat          bits_cum and seed-averaged omega_o
//! plot.gp                  gnuplot script over the .dat files
//! ```

mod config;
mod output;
mod theory;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cgt::{CgtConfig, Engine, StopRule, Trace};
use crate::compressors::CompressorSpec;
use crate::graph::{make_topology, metropolis_weights, MixingMatrix, Topology};
use crate::problems::{generate_ridge, RidgeParams, RidgeProblem};
use crate::seed::{self, label};
use crate::Result;

pub use config::{Algorithm, CellConfig, ExperimentConfig, ProblemSection, RunSection, StepSize};
pub use output::{emit_plotdata, read_plot_file, write_atomic};
pub use theory::{bounds_report, cell_theory, certify_report, BoundsReport, CellTheory, CertifyReport};

/// Cumulative bits at the first iterate with `omega_o <= tol`.
pub fn bits_to_tolerance(trace: &Trace, tol: f64) -> Option<u64> {
    trace.bits_to_tolerance(tol)
}

/// A cell after defaults and compressor strings are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedCell {
    pub label: String,
    pub slug: String,
    pub algorithm: Algorithm,
    pub spec_x: CompressorSpec,
    pub spec_y: CompressorSpec,
    pub gamma: f64,
    pub eta: Vec<f64>,
    pub alpha_x: f64,
    pub alpha_y: f64,
}

impl ResolvedCell {
    /// Engine settings for repeat `r` under master seed `master`.
    pub fn cgt_config(&self, master: u64, repeat: usize, iterations: usize) -> CgtConfig {
        CgtConfig {
            gamma: self.gamma,
            eta: self.eta.clone(),
            alpha_x: self.alpha_x,
            alpha_y: self.alpha_y,
            spec_x: self.spec_x.clone(),
            spec_y: self.spec_y.clone(),
            iterations,
            seed: run_seed(master, repeat),
        }
    }
}

pub fn run_seed(master: u64, repeat: usize) -> u64 {
    seed::derive_seed(master, &[label::RUN, repeat as u64])
}

/// The shared instance of an experiment.
pub struct Instance {
    pub problem: RidgeProblem,
    pub topology: Topology,
    pub mixing: MixingMatrix,
}

impl Instance {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let problem = generate_ridge(RidgeParams {
            n: cfg.problem.n,
            p: cfg.problem.p,
            rho: cfg.problem.rho,
            noise_std: cfg.problem.noise_std,
            seed: cfg.seed,
        })?;
        let topology = make_topology(cfg.topology, cfg.problem.n, cfg.topology_seed.unwrap_or(cfg.seed))?;
        let mixing = metropolis_weights(&topology);
        Ok(Instance {
            problem,
            topology,
            mixing,
        })
    }

    /// SHA-256 over the serialized problem and topology.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.problem.to_json().as_bytes());
        h.update(self.topology.to_json().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub repeat: usize,
    pub seed: u64,
    /// `None` if the run diverged.
    #[serde(skip)]
    pub trace: Option<Trace>,
    pub error: Option<String>,
    pub trace_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn bits_to_tolerance(&self, tol: f64) -> Option<u64> {
        self.trace.as_ref().and_then(|t| t.bits_to_tolerance(tol))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub label: String,
    pub slug: String,
    pub algorithm: Algorithm,
    pub compressor: String,
    pub runs: Vec<RunRecord>,
}

impl CellOutcome {
    /// Traces of the runs that finished.
    pub fn traces(&self) -> impl Iterator<Item = &Trace> {
        self.runs.iter().filter_map(|r| r.trace.as_ref())
    }

    /// `(bits_cum, mean omega_o)` per iteration over the finished runs,
    /// truncated to the shortest trace.
    pub fn averaged(&self) -> Vec<(u64, f64)> {
        let traces: Vec<&Trace> = self.traces().collect();
        let Some(len) = traces.iter().map(|t| t.steps().len() + 1).min() else {
            return Vec::new();
        };
        let cols: Vec<Vec<_>> = traces.iter().map(|t| t.iter().take(len).collect()).collect();
        (0..len)
            .map(|k| {
                let mean = cols.iter().map(|c| c[k].omega_o).sum::<f64>() / cols.len() as f64;
                (cols[0][k].bits_cum, mean)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub output_dir: PathBuf,
    pub instance_digest: String,
    pub report_tol: f64,
    pub cells: Vec<CellOutcome>,
}

impl SweepResult {
    pub fn cell(&self, label: &str) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.label == label)
    }
}

/// Runs every cell and repeat, writes all outputs, and returns the traces.
/// A diverging run is recorded in its summary row; the sweep carries on.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepResult> {
    run_cells(cfg, None)
}

/// As [`run_experiment`], restricted to the cell labelled `only` if given.
pub fn run_cells(cfg: &ExperimentConfig, only: Option<&str>) -> Result<SweepResult> {
    let mut cells = cfg.resolve()?;
    if let Some(label) = only {
        cells.retain(|c| c.label == label);
        if cells.is_empty() {
            return Err(crate::Error::InvalidConfig(format!("no cell labelled `{label}`")));
        }
    }
    let instance = Instance::generate(cfg)?;
    let dir = &cfg.output_dir;
    output::prepare_dirs(dir)?;
    write_atomic(&dir.join("config.resolved.toml"), cfg.resolved_toml(&cells)?.as_bytes())?;
    write_atomic(&dir.join("topology.json"), instance.topology.to_json().as_bytes())?;
    write_atomic(&dir.join("problem.json"), instance.problem.to_json().as_bytes())?;

    let stop = StopRule {
        max_iter: cfg.run.max_iter,
        tol: cfg.run.stop_tol,
    };
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.repeats).map(move |r| (c, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, r)| {
            let cell = &cells[c];
            let cgt = cell.cgt_config(cfg.seed, r, cfg.run.max_iter);
            let outcome = Engine::new(&instance.problem, &instance.mixing, &cgt).and_then(|e| e.run(stop));
            match outcome {
                Ok(out) => {
                    let path = dir.join("traces").join(format!("{}_seed{r}.csv", cell.slug));
                    write_atomic(&path, out.trace.to_csv_string().as_bytes())?;
                    Ok(RunRecord {
                        repeat: r,
                        seed: cgt.seed,
                        trace: Some(out.trace),
                        error: None,
                        trace_path: Some(path),
                    })
                }
                Err(e @ crate::Error::Divergence { .. }) => Ok(RunRecord {
                    repeat: r,
                    seed: cgt.seed,
                    trace: None,
                    error: Some(e.to_string()),
                    trace_path: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<RunRecord>>>()?;

    let mut records = records.into_iter();
    let outcomes: Vec<CellOutcome> = cells
        .iter()
        .map(|cell| CellOutcome {
            label: cell.label.clone(),
            slug: cell.slug.clone(),
            algorithm: cell.algorithm,
            compressor: config::describe_compressors(&cell.spec_x, &cell.spec_y),
            runs: records.by_ref().take(cfg.repeats).collect(),
        })
        .collect();
    let result = SweepResult {
        name: cfg.name.clone(),
        output_dir: dir.clone(),
        instance_digest: instance.digest(),
        report_tol: cfg.run.report_tol,
        cells: outcomes,
    };
    output::write_summary(&result)?;
    emit_plotdata(&result)?;
    Ok(result)
}
