use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ResolvedCell;
use crate::compressors::CompressorSpec;
use crate::graph::TopologyKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Compressed gradient tracking.
    Cgt,
    /// Uncompressed gradient tracking: identity operators, `gamma = alpha = 1`.
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Uniform(f64),
    PerAgent(Vec<f64>),
}

impl StepSize {
    fn expand(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            StepSize::Uniform(e) => Ok(vec![*e; n]),
            StepSize::PerAgent(v) if v.len() == n => Ok(v.clone()),
            StepSize::PerAgent(v) => Err(Error::InvalidConfig(format!(
                "eta lists {} values for {n} agents",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub noise_std: f64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            n: 100,
            p: 500,
            rho: 0.1,
            noise_std: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub max_iter: usize,
    /// Stop a run early once `omega_o` reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_tol: Option<f64>,
    /// Tolerance for the summary's iterations- and bits-to-tolerance.
    pub report_tol: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            max_iter: 20_000,
            stop_tol: None,
            report_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    pub label: String,
    pub algorithm: Algorithm,
    /// Defaults to `topk:10` for C-GT; GT cells take no compressor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compressor: Option<String>,
    /// Operator for the gradient tracker when it differs from `compressor`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compressor_y: Option<String>,
    pub gamma: f64,
    pub eta: StepSize,
    pub alpha_x: f64,
    pub alpha_y: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            label: "C-GT / Top-10".into(),
            algorithm: Algorithm::Cgt,
            compressor: None,
            compressor_y: None,
            gamma: 0.05,
            eta: StepSize::Uniform(0.005),
            alpha_x: 1.0,
            alpha_y: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Seed for the random graph; defaults to `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topology_seed: Option<u64>,
    pub repeats: usize,
    pub problem: ProblemSection,
    pub topology: TopologyKind,
    pub run: RunSection,
    #[serde(rename = "cell")]
    pub cells: Vec<CellConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: PathBuf::from("out"),
            seed: 1,
            topology_seed: None,
            repeats: 1,
            problem: ProblemSection::default(),
            topology: TopologyKind::ErdosRenyi { p_edge: 0.3 },
            run: RunSection::default(),
            cells: vec![CellConfig::default()],
        }
    }
}

fn invalid<T>(m: String) -> Result<T> {
    Err(Error::InvalidConfig(m))
}

const DEFAULT_COMPRESSOR: &str = "topk:10";

pub(super) fn slugify(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

pub(super) fn describe_compressors(x: &CompressorSpec, y: &CompressorSpec) -> String {
    if x == y {
        x.to_string()
    } else {
        format!("{x} | {y}")
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse {
            what: "experiment config".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            what: "experiment config".into(),
            message: e.to_string(),
        })
    }

    /// Checks the config and resolves every cell.
    pub fn resolve(&self) -> Result<Vec<ResolvedCell>> {
        if self.repeats == 0 {
            return invalid("repeats must be at least 1".into());
        }
        if self.cells.is_empty() {
            return invalid("no cells to run".into());
        }
        if !(self.run.report_tol >= 0.0) {
            return invalid(format!("report_tol must be nonnegative, got {}", self.run.report_tol));
        }
        if let Some(t) = self.run.stop_tol {
            if !(t >= 0.0) {
                return invalid(format!("stop_tol must be nonnegative, got {t}"));
            }
        }
        let mut slugs = BTreeSet::new();
        let (n, p) = (self.problem.n, self.problem.p);
        self.cells
            .iter()
            .map(|cell| {
                let slug = slugify(&cell.label);
                if slug.is_empty() {
                    return invalid(format!("cell label `{}` has no usable characters", cell.label));
                }
                if !slugs.insert(slug.clone()) {
                    return invalid(format!("cell label `{}` is not unique", cell.label));
                }
                let eta = cell.eta.expand(n)?;
                let resolved = match cell.algorithm {
                    Algorithm::Gt => {
                        let given = cell.compressor.iter().chain(&cell.compressor_y);
                        if given.map(|s| CompressorSpec::parse(s, p)).any(|s| !s.is_ok_and(|s| s.is_identity())) {
                            return invalid(format!("gt cell `{}` cannot use a compressor", cell.label));
                        }
                        let id = CompressorSpec::identity(p);
                        ResolvedCell {
                            label: cell.label.clone(),
                            slug,
                            algorithm: Algorithm::Gt,
                            spec_x: id.clone(),
                            spec_y: id,
                            gamma: 1.0,
                            eta,
                            alpha_x: 1.0,
                            alpha_y: 1.0,
                        }
                    }
                    Algorithm::Cgt => {
                        let spec_x = CompressorSpec::parse(cell.compressor.as_deref().unwrap_or(DEFAULT_COMPRESSOR), p)?;
                        let spec_y = match &cell.compressor_y {
                            Some(s) => CompressorSpec::parse(s, p)?,
                            None => spec_x.clone(),
                        };
                        ResolvedCell {
                            label: cell.label.clone(),
                            slug,
                            algorithm: Algorithm::Cgt,
                            spec_x,
                            spec_y,
                            gamma: cell.gamma,
                            eta,
                            alpha_x: cell.alpha_x,
                            alpha_y: cell.alpha_y,
                        }
                    }
                };
                resolved.cgt_config(self.seed, 0, self.run.max_iter).validate(n, p)?;
                Ok(resolved)
            })
            .collect()
    }

    /// The config with canonical compressor strings and GT cells normalized.
    pub fn resolved_toml(&self, cells: &[ResolvedCell]) -> Result<String> {
        let mut out = self.clone();
        out.cells = self
            .cells
            .iter()
            .filter_map(|c| cells.iter().find(|r| r.label == c.label).map(|r| (c, r)))
            .map(|(c, r)| CellConfig {
                label: r.label.clone(),
                algorithm: r.algorithm,
                compressor: Some(r.spec_x.to_string()),
                compressor_y: (r.spec_y != r.spec_x).then(|| r.spec_y.to_string()),
                gamma: r.gamma,
                eta: c.eta.clone(),
                alpha_x: r.alpha_x,
                alpha_y: r.alpha_y,
            })
            .collect();
        out.to_toml()
    }

    pub fn cell(&self, label: &str) -> Option<&CellConfig> {
        self.cells.iter().find(|c| c.label == label)
    }
}
