//! Convergence theory in numbers: step-size bounds, the 5x5 transition matrix
//! bounding one iteration of the error vector, and the positive-vector rate
//! certificate for it.
//!
//! The matrix is stored as `A = I + B`. Certified rates are `1 - O(eta_hat)`
//! and for badly conditioned constants `eta_hat` falls far below machine
//! epsilon, so `1 - x` would round to one. Diagonal offsets are therefore
//! assembled directly and every check runs on `B`.

use serde::{Deserialize, Serialize};

use crate::cgt::Trace;
use crate::compressors::CompressorConstants;
use crate::graph::Spectrum;
use crate::{Error, Result};

pub const ROW_NAMES: [&str; 5] = ["optimality", "consensus", "tracking", "x_compression", "y_compression"];

const PERRON_TOL: f64 = 1e-12;
const PERRON_CAP: usize = 100_000;
/// Multiple of machine epsilon allowed per unit of absolute term mass when
/// testing `B e <= -gap e`.
const ROUNDING_ALLOWANCE: f64 = 8.0 * f64::EPSILON;
/// Scale of `eps2` relative to `eps4` when the compressor is exact.
const EXACT_EPS2_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub n: usize,
    /// `M` with `eta_bar >= M eta_hat`; 1 for uniform step sizes.
    pub heterogeneity: f64,
    pub tau_x: f64,
    pub tau_y: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub c: f64,
    pub delta: f64,
    pub r: f64,
    pub mu: f64,
    pub l: f64,
    pub s: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta_hat: f64,
    pub eta_bar: f64,
}

impl AnalysisConfig {
    /// Constants with `tau_x = tau_y = 1/(1 - delta/2)` and `alpha = 1/r`;
    /// step sizes left at zero.
    pub fn new(
        n: usize,
        heterogeneity: f64,
        constants: &CompressorConstants,
        mu: f64,
        l: f64,
        spectrum: &Spectrum,
    ) -> Self {
        let tau = default_tau(constants.delta);
        AnalysisConfig {
            n,
            heterogeneity,
            tau_x: tau,
            tau_y: tau,
            alpha_x: 1.0 / constants.r,
            alpha_y: 1.0 / constants.r,
            c: constants.c,
            delta: constants.delta,
            r: constants.r,
            mu,
            l,
            s: spectrum.s,
            lambda: spectrum.lambda,
            gamma: 0.0,
            eta_hat: 0.0,
            eta_bar: 0.0,
        }
    }

    pub fn with_steps(mut self, gamma: f64, eta_hat: f64, eta_bar: f64) -> Self {
        self.gamma = gamma;
        self.eta_hat = eta_hat;
        self.eta_bar = eta_bar;
        self
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    pub fn rho_w(&self) -> f64 {
        1.0 - self.s
    }

    pub fn t_x(&self) -> f64 {
        3.0 * self.tau_x / (self.tau_x - 1.0)
    }

    pub fn t_y(&self) -> f64 {
        3.0 * self.tau_y / (self.tau_y - 1.0)
    }

    /// `c_x - 1`, evaluated without cancelling against one.
    fn c_x_offset(&self) -> f64 {
        (self.tau_x - 1.0) - self.tau_x * self.alpha_x * self.r * self.delta
    }

    fn c_y_offset(&self) -> f64 {
        (self.tau_y - 1.0) - self.tau_y * self.alpha_y * self.r * self.delta
    }

    pub fn c_x(&self) -> f64 {
        self.tau_x * (1.0 - self.alpha_x * self.r * self.delta)
    }

    pub fn c_y(&self) -> f64 {
        self.tau_y * (1.0 - self.alpha_y * self.r * self.delta)
    }

    /// `1 - theta = M eta_hat mu / 2`.
    pub fn rate_gap(&self) -> f64 {
        0.5 * self.heterogeneity * self.eta_hat * self.mu
    }

    pub fn validate_constants(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.heterogeneity > 0.0 && self.heterogeneity <= 1.0) {
            return bad(format!("M must lie in (0, 1], got {}", self.heterogeneity));
        }
        if !(self.delta > 0.0) {
            return Err(Error::NotContractive { delta: self.delta });
        }
        if self.delta > 1.0 {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return bad(format!("C must be finite and nonnegative, got {}", self.c));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if !(self.mu > 0.0 && self.l >= self.mu && self.l.is_finite()) {
            return bad(format!("need 0 < mu <= L, got mu = {}, L = {}", self.mu, self.l));
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            return bad(format!("s must lie in (0, 1], got {}", self.s));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        Ok(())
    }

    /// Everything needed by the matrix and the certificate.
    pub fn validate(&self) -> Result<()> {
        self.validate_constants()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, tau) in [("tau_x", self.tau_x), ("tau_y", self.tau_y)] {
            if !(tau > 1.0 && tau.is_finite()) {
                return bad(format!("{name} must exceed 1, got {tau}"));
            }
        }
        for (name, a) in [("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y)] {
            if !(a > 0.0 && a * self.r <= 1.0 + 1e-12) {
                return bad(format!("{name} must lie in (0, 1/r], got {a}"));
            }
        }
        if !(self.c_x_offset() < 0.0) || !(self.c_y_offset() < 0.0) {
            return bad(format!("need c_x, c_y < 1, got {} and {}", self.c_x(), self.c_y()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.eta_hat > 0.0 && self.eta_hat.is_finite()) {
            return bad(format!("eta_hat must be positive, got {}", self.eta_hat));
        }
        if self.eta_bar < self.heterogeneity * self.eta_hat * (1.0 - 1e-12) {
            return bad(format!(
                "eta_bar = {} is below M eta_hat = {}",
                self.eta_bar,
                self.heterogeneity * self.eta_hat
            ));
        }
        Ok(())
    }
}

pub fn default_tau(delta: f64) -> f64 {
    1.0 / (1.0 - 0.5 * delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepsizeBounds {
    pub gamma_max: f64,
    pub eta_hat_max: f64,
    pub m: f64,
}

/// Closed-form bounds under the default `tau`, `alpha = 1/r` and default
/// `eps`; `tau`, `alpha` and step sizes in `cfg` are ignored.
pub fn theorem1_stepsize_bounds(cfg: &AnalysisConfig) -> Result<StepsizeBounds> {
    cfg.validate_constants()?;
    let (c, d, lam, s, big_m) = (cfg.c, cfg.delta, cfg.lambda, cfg.s, cfg.heterogeneity);
    let k2 = cfg.kappa().powi(2);
    let s2 = s * s;
    let eps3 = 432.0 * c * lam * lam / (s2 * s2) + 48.0 * c * lam / s2;
    let m = (6.0 / d)
        * ((72.0 * k2 / (big_m * big_m) + lam + 3.0) * eps3
            + (3.0 * lam + 6.0) * (12.0 * c * lam / s2)
            + 4.0 * c * lam)
        + big_m / (2.0 * cfg.kappa());
    let gamma_max = f64::min(1.0, d / (m * (2.0 - d)));
    let inner = 12.0 * ((24.0 * k2 / (big_m * big_m) + 1.0) * (4.0 * s2 + 36.0 * lam) + 2.0 * s2);
    let eta_hat_max = s2 / inner.sqrt() * gamma_max / cfg.l;
    Ok(StepsizeBounds {
        gamma_max,
        eta_hat_max,
        m,
    })
}

/// Bounds from the general sufficient conditions for a given `eps`, using
/// the `tau` and `alpha` in `cfg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralBounds {
    pub gamma_max: f64,
    pub eta_hat_max: f64,
    pub m_x: f64,
    pub m_y: f64,
}

pub fn general_stepsize_bounds(cfg: &AnalysisConfig, eps: &EpsilonVector) -> Result<GeneralBounds> {
    cfg.validate_constants()?;
    let (c, lam, s, big_m) = (cfg.c, cfg.lambda, cfg.s, cfg.heterogeneity);
    let n = cfg.n as f64;
    let EpsilonVector { eps1, eps2, eps3, eps4, eps5 } = *eps;
    let sum = 2.0 * n * eps1 + 2.0 * eps2 + eps3;
    let kappa = cfg.kappa();
    let (t_x, t_y) = (cfg.t_x(), cfg.t_y());
    let m_x = t_x * sum + t_x * lam * (eps2 + c * eps4) + big_m * eps4 / (2.0 * kappa);
    let m_y = 3.0 * t_y * sum + t_y * lam * (3.0 * eps2 + eps3 + 3.0 * c * eps4 + c * eps5) + big_m * eps5 / (2.0 * kappa);
    let gamma_max = 1.0_f64
        .min(-cfg.c_x_offset() * eps4 / m_x)
        .min(-cfg.c_y_offset() * eps5 / m_y);
    let sg_l = s * gamma_max / cfg.l;
    let eta_hat_max = (s * gamma_max / (3.0 * big_m * cfg.mu))
        .min(gamma_max / cfg.l)
        .min((eps2 / (12.0 * sum)).sqrt() * sg_l)
        .min((eps3 / (36.0 * sum)).sqrt() * sg_l);
    Ok(GeneralBounds {
        gamma_max,
        eta_hat_max,
        m_x,
        m_y,
    })
}

/// The transition matrix `A = I + B`, rows and columns ordered
/// `(optimality, consensus, tracking, x_compression, y_compression)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    offset: [[f64; 5]; 5],
}

impl TransitionMatrix {
    /// Builds from `A - I` directly.
    pub fn from_offset(offset: [[f64; 5]; 5]) -> Result<Self> {
        for (i, row) in offset.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                let entry = if i == j { 1.0 + b } else { b };
                let negative = if i == j { b < -1.0 } else { b < 0.0 };
                if negative || !b.is_finite() {
                    return Err(Error::NegativeEntry { row: i, col: j, value: entry });
                }
            }
        }
        Ok(TransitionMatrix { offset })
    }

    pub fn offset(&self) -> &[[f64; 5]; 5] {
        &self.offset
    }

    /// `A` itself; diagonal entries are rounded to the nearest double.
    pub fn dense(&self) -> [[f64; 5]; 5] {
        let mut a = self.offset;
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        a
    }

    pub fn apply(&self, v: &[f64; 5]) -> [f64; 5] {
        let a = self.dense();
        std::array::from_fn(|i| (0..5).map(|j| a[i][j] * v[j]).sum())
    }

    /// Perron root of `A`, returned as `rho(A) - 1`, computed on the shifted
    /// nonnegative matrix `B + sigma I`.
    pub fn spectral_offset(&self, start: [f64; 5]) -> PerronEstimate<5> {
        let sigma = (0..5).map(|i| -self.offset[i][i]).fold(0.0_f64, f64::max);
        let mut shifted = self.offset;
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] += sigma;
        }
        let mut est = perron_root(&shifted, start, PERRON_TOL, PERRON_CAP);
        est.lower -= sigma;
        est.upper -= sigma;
        est
    }
}

/// Assembles the matrix from the constants and step sizes in `cfg`.
pub fn build_transition_matrix(cfg: &AnalysisConfig) -> Result<TransitionMatrix> {
    cfg.validate()?;
    let n = cfg.n as f64;
    let (mu, l, s, lam, c, big_m) = (cfg.mu, cfg.l, cfg.s, cfg.lambda, cfg.c, cfg.heterogeneity);
    let (g, e) = (cfg.gamma, cfg.eta_hat);
    let (l2, l4, e2) = (l * l, l.powi(4), e * e);
    let sg = s * g;
    // (rho~^2 - 1)/2 with rho~ = 1 - s gamma
    let mix = -sg * (1.0 - 0.5 * sg);
    let (tx, ty) = (cfg.t_x(), cfg.t_y());
    let g2 = g * g;

    let b = [
        [
            -1.5 * big_m * e * mu,
            6.0 * e * l2 / (mu * n),
            6.0 * e / (mu * n * big_m),
            0.0,
            0.0,
        ],
        [
            4.0 * n * l2 * e2 / sg,
            mix + 4.0 * l2 * e2 / sg,
            2.0 * e2 / sg,
            2.0 * c * lam * g / s,
            0.0,
        ],
        [
            12.0 * n * l4 * e2 / sg,
            12.0 * l4 * e2 / sg + 6.0 * lam * l2 * g / s,
            mix + 6.0 * l2 * e2 / sg,
            6.0 * c * lam * l2 * g / s,
            2.0 * c * lam * g / s,
        ],
        [
            2.0 * tx * n * l2 * e2,
            2.0 * tx * l2 * e2 + tx * lam * g2,
            tx * e2,
            cfg.c_x_offset() + tx * c * lam * g2,
            0.0,
        ],
        [
            6.0 * ty * n * l4 * e2,
            6.0 * ty * l4 * e2 + 3.0 * ty * lam * l2 * g2,
            ty * lam * g2 + 3.0 * ty * l2 * e2,
            3.0 * ty * c * lam * l2 * g2,
            cfg.c_y_offset() + ty * c * lam * g2,
        ],
    ];
    TransitionMatrix::from_offset(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonVector {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub eps4: f64,
    pub eps5: f64,
}

impl EpsilonVector {
    /// The test vector `(eps1, eps2, L^2 eps3, eps4, L^2 eps5)`.
    pub fn certificate_vector(&self, l: f64) -> [f64; 5] {
        let l2 = l * l;
        [self.eps1, self.eps2, l2 * self.eps3, self.eps4, l2 * self.eps5]
    }

    /// Checks the sufficient conditions on `eps`, reporting the first one that
    /// fails.
    pub fn check(&self, cfg: &AnalysisConfig) -> Result<()> {
        let (c, lam, s2, big_m) = (cfg.c, cfg.lambda, cfg.s * cfg.s, cfg.heterogeneity);
        let n = cfg.n as f64;
        let k2 = cfg.kappa().powi(2);
        let EpsilonVector { eps1, eps2, eps3, eps4, eps5 } = *self;
        let slack = 1.0 - 1e-12;
        let checks = [
            ("eps1 > 0", eps1 > 0.0),
            ("eps2 > 0", eps2 > 0.0),
            ("eps3 > 0", eps3 > 0.0),
            ("eps4 > 0", eps4 > 0.0),
            ("eps5 > 0", eps5 > 0.0),
            ("n eps1 >= 12 kappa^2 eps3 / M^2", n * eps1 >= slack * 12.0 * k2 * eps3 / (big_m * big_m)),
            ("eps2 >= 12 C lambda eps4 / s^2", eps2 >= slack * 12.0 * c * lam * eps4 / s2),
            ("eps3 >= M eps2", eps3 >= slack * big_m * eps2),
            (
                "eps3 >= 12 lambda (3 eps2 + C (3 eps4 + eps5)) / s^2",
                eps3 >= slack * 12.0 * lam * (3.0 * eps2 + c * (3.0 * eps4 + eps5)) / s2,
            ),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::EpsilonConstraint { constraint: name }),
            None => Ok(()),
        }
    }
}

/// `eps4 = eps5 = 1`, `eps2 = 12 C lambda / s^2`,
/// `eps3 = 432 C lambda^2 / s^4 + 48 C lambda / s^2`,
/// `n eps1 = 12 kappa^2 eps3 / M^2`.
///
/// For `C = 0` those collapse to zero; then `eps2 = 1e-6`,
/// `eps3 = max(4 eps2, M eps2, 36 lambda eps2 / s^2)` and `eps1` as above.
pub fn default_epsilon(cfg: &AnalysisConfig) -> Result<EpsilonVector> {
    cfg.validate_constants()?;
    let (c, lam, s2, big_m) = (cfg.c, cfg.lambda, cfg.s * cfg.s, cfg.heterogeneity);
    let (eps4, eps5) = (1.0, 1.0);
    let (eps2, eps3) = if c > 0.0 {
        (12.0 * c * lam / s2, 432.0 * c * lam * lam / (s2 * s2) + 48.0 * c * lam / s2)
    } else {
        let eps2 = EXACT_EPS2_SCALE * eps4;
        let eps3 = (4.0 * eps2).max(big_m * eps2).max(36.0 * lam * eps2 / s2);
        (eps2, eps3)
    };
    let eps1 = 12.0 * cfg.kappa().powi(2) / (big_m * big_m) * eps3 / cfg.n as f64;
    let eps = EpsilonVector { eps1, eps2, eps3, eps4, eps5 };
    eps.check(cfg)?;
    Ok(eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerronEstimate<const N: usize> {
    /// Collatz-Wielandt lower bound `min_i (Av)_i / v_i`.
    pub lower: f64,
    /// Collatz-Wielandt upper bound `max_i (Av)_i / v_i`.
    pub upper: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on a nonnegative matrix from a positive start vector.
/// Stops once the Collatz-Wielandt bounds agree to `tol` relative or after
/// `cap` multiplications. The upper bound never increases along the way.
pub fn perron_root<const N: usize>(a: &[[f64; N]; N], start: [f64; N], tol: f64, cap: usize) -> PerronEstimate<N> {
    let mut v = start;
    let mut best = PerronEstimate {
        lower: 0.0,
        upper: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    for it in 1..=cap {
        let w: [f64; N] = std::array::from_fn(|i| (0..N).map(|j| a[i][j] * v[j]).sum());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..N {
            if v[i] > 0.0 {
                let q = w[i] / v[i];
                lo = lo.min(q);
                hi = hi.max(q);
            }
        }
        best.lower = best.lower.max(lo);
        best.upper = best.upper.min(hi);
        best.iterations = it;
        if best.upper - best.lower <= tol * best.upper.abs() {
            best.converged = true;
            break;
        }
        let norm: f64 = w.iter().sum();
        if !(norm > 0.0 && norm.is_finite()) {
            break;
        }
        v = std::array::from_fn(|i| w[i] / norm);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    pub certified: bool,
    /// Names of the rows where `A e <= theta e` fails.
    pub violated: Vec<String>,
    /// `1 - theta`.
    pub gap: f64,
    pub theta: f64,
    /// Per row, `((A e)_i - theta e_i) / e_i`; nonpositive where satisfied.
    pub margins: [f64; 5],
    /// Upper bound on `rho(A) - 1`.
    pub rho_offset: f64,
    pub rho: f64,
    pub rho_converged: bool,
}

/// Tests `A e <= (1 - gap) e` componentwise for the certificate vector `e`
/// and bounds `rho(A)` by power iteration started at `e`.
pub fn certify_rate(a: &TransitionMatrix, eps: &EpsilonVector, l: f64, gap: f64) -> RateCertificate {
    let e = eps.certificate_vector(l);
    let b = a.offset();
    let mut violated = Vec::new();
    let mut margins = [0.0; 5];
    for i in 0..5 {
        let terms: Vec<f64> = (0..5).map(|j| b[i][j] * e[j]).collect();
        let lhs = terms.iter().sum::<f64>() + gap * e[i];
        let mass = terms.iter().map(|t| t.abs()).sum::<f64>() + gap * e[i];
        margins[i] = lhs / e[i];
        if lhs > ROUNDING_ALLOWANCE * mass {
            violated.push(ROW_NAMES[i].to_string());
        }
    }
    let est = a.spectral_offset(e);
    RateCertificate {
        certified: violated.is_empty(),
        violated,
        gap,
        theta: 1.0 - gap,
        margins,
        rho_offset: est.upper,
        rho: 1.0 + est.upper,
        rho_converged: est.converged,
    }
}

/// Builds the matrix for `cfg` and certifies it with [`default_epsilon`] at
/// `theta = 1 - M eta_hat mu / 2`.
pub fn certify_config(cfg: &AnalysisConfig) -> Result<(TransitionMatrix, EpsilonVector, RateCertificate)> {
    let a = build_transition_matrix(cfg)?;
    let eps = default_epsilon(cfg)?;
    let cert = certify_rate(&a, &eps, cfg.l, cfg.rate_gap());
    Ok((a, eps, cert))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub iterations: usize,
    pub seeds: usize,
    /// Fraction of `(k, component)` pairs with `w^{k+1} <= (1 + slack) A w^k`.
    pub pair_fraction: f64,
    /// Fraction of iterations where all five components pass.
    pub iteration_fraction: f64,
    /// Per component, the largest observed `w^{k+1}_i / (A w^k)_i`.
    pub worst_ratio: [f64; 5],
}

/// Averages the error vectors over traces and compares each step with the
/// matrix bound. Traces are truncated to the shortest.
pub fn empirical_contraction_check(traces: &[Trace], a: &TransitionMatrix, slack: f64) -> Result<ContractionReport> {
    let len = traces
        .iter()
        .map(|t| t.steps().len() + 1)
        .min()
        .ok_or_else(|| Error::InvalidConfig("no traces to check".into()))?;
    let r = traces.len() as f64;
    let mean: Vec<[f64; 5]> = (0..len)
        .map(|k| {
            let mut w = [0.0; 5];
            for t in traces {
                let e = t.iter().nth(k).expect("within shortest trace").as_array();
                for i in 0..5 {
                    w[i] += e[i] / r;
                }
            }
            w
        })
        .collect();
    let mut pairs_ok = 0usize;
    let mut iters_ok = 0usize;
    let mut worst = [0.0_f64; 5];
    for k in 0..len - 1 {
        let bound = a.apply(&mean[k]);
        let mut all = true;
        for i in 0..5 {
            let next = mean[k + 1][i];
            if next <= (1.0 + slack) * bound[i] {
                pairs_ok += 1;
            } else {
                all = false;
            }
            if bound[i] > 0.0 {
                worst[i] = worst[i].max(next / bound[i]);
            } else if next > 0.0 {
                worst[i] = f64::INFINITY;
            }
        }
        iters_ok += all as usize;
    }
    let steps = (len - 1).max(1) as f64;
    Ok(ContractionReport {
        iterations: len - 1,
        seeds: traces.len(),
        pair_fraction: pairs_ok as f64 / (5.0 * steps),
        iteration_fraction: iters_ok as f64 / steps,
        worst_ratio: worst,
    })
}
