use serde::Serialize;

use super::{ExperimentConfig, Instance, ResolvedCell};
use crate::analysis::{certify_config, theorem1_stepsize_bounds, AnalysisConfig, EpsilonVector, RateCertificate, StepsizeBounds};
use crate::compressors::{certify_constants, CompressorConstants, MIN_TRIALS};
use crate::problems::LocalObjectives;
use crate::seed::{self, label};
use crate::{Error, Result};

/// Theory inputs for one cell: certified operator constants and the
/// analysis config at the cell's own step sizes and scaling parameters.
#[derive(Debug, Clone, Serialize)]
pub struct CellTheory {
    pub label: String,
    pub constants: CompressorConstants,
    pub analysis: AnalysisConfig,
}

/// Builds the theory inputs for the cell labelled `label`, or the first cell.
pub fn cell_theory(cfg: &ExperimentConfig, label: Option<&str>) -> Result<CellTheory> {
    let cells = cfg.resolve()?;
    let cell: &ResolvedCell = match label {
        Some(l) => cells
            .iter()
            .find(|c| c.label == l)
            .ok_or_else(|| Error::InvalidConfig(format!("no cell labelled `{l}`")))?,
        None => &cells[0],
    };
    if cell.spec_x != cell.spec_y {
        return Err(Error::InvalidConfig(format!(
            "cell `{}` compresses X and Y differently; the analysis assumes one operator",
            cell.label
        )));
    }
    let instance = Instance::generate(cfg)?;
    let mut rng = seed::rng_from(cfg.seed, &[label::CERTIFY]);
    let constants = certify_constants(&cell.spec_x, MIN_TRIALS, &mut rng)?;
    let eta_hat = cell.eta.iter().copied().fold(0.0, f64::max);
    let eta_bar = cell.eta.iter().sum::<f64>() / cell.eta.len() as f64;
    let mut analysis = AnalysisConfig::new(
        cfg.problem.n,
        eta_bar / eta_hat,
        &constants,
        instance.problem.mu(),
        instance.problem.smoothness(),
        &instance.mixing.spectrum(),
    )
    .with_steps(cell.gamma, eta_hat, eta_bar);
    analysis.alpha_x = cell.alpha_x;
    analysis.alpha_y = cell.alpha_y;
    Ok(CellTheory {
        label: cell.label.clone(),
        constants,
        analysis,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub label: String,
    pub constants: CompressorConstants,
    pub kappa: f64,
    pub s: f64,
    pub lambda: f64,
    pub gamma_max: f64,
    pub eta_hat_max: f64,
    pub m: f64,
    /// Upper bound on `rho(A)` at the bounds.
    pub rho_a: f64,
    pub rho_a_minus_one: f64,
    pub certified: bool,
}

/// Closed-form step-size bounds for the cell's operator and the rate
/// certificate at those bounds (default `tau` and `alpha = 1/r`).
pub fn bounds_report(theory: &CellTheory) -> Result<BoundsReport> {
    let a = &theory.analysis;
    let StepsizeBounds { gamma_max, eta_hat_max, m } = theorem1_stepsize_bounds(a)?;
    let mut at = AnalysisConfig::new(
        a.n,
        a.heterogeneity,
        &theory.constants,
        a.mu,
        a.l,
        &crate::graph::Spectrum {
            rho_w: 1.0 - a.s,
            s: a.s,
            lambda: a.lambda,
        },
    );
    at = at.with_steps(gamma_max, eta_hat_max, a.heterogeneity * eta_hat_max);
    let (_, _, cert) = certify_config(&at)?;
    Ok(BoundsReport {
        label: theory.label.clone(),
        constants: theory.constants,
        kappa: a.kappa(),
        s: a.s,
        lambda: a.lambda,
        gamma_max,
        eta_hat_max,
        m,
        rho_a: cert.rho,
        rho_a_minus_one: cert.rho_offset,
        certified: cert.certified,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub label: String,
    pub analysis: AnalysisConfig,
    pub matrix: [[f64; 5]; 5],
    pub epsilon: EpsilonVector,
    pub certificate: RateCertificate,
}

/// The rate certificate at the cell's own step sizes.
pub fn certify_report(theory: &CellTheory) -> Result<CertifyReport> {
    let (a, epsilon, certificate) = certify_config(&theory.analysis)?;
    Ok(CertifyReport {
        label: theory.label.clone(),
        analysis: theory.analysis,
        matrix: a.dense(),
        epsilon,
        certificate,
    })
}
