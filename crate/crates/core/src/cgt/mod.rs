//! The compressed gradient tracking iteration.
//!
//! Per iteration every agent compresses the difference between its variable
//! and a reference point `H`, broadcasts the compressed message once, and
//! updates both its own reference and a mixed copy `H_w = W H` of its
//! neighbors' references. The decision variable and the gradient tracker go
//! through the same procedure with their own scaling parameters:
//!
//! ```text
//! X+ = X - gamma (X^ - X^_w) - D Y
//! Y+ = Y - gamma (Y^ - Y^_w) + grad F(X+) - grad F(X)
//! ```
//!
//! With identity compressors and `gamma = 1` this is plain gradient tracking.

mod trace;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::CompressorSpec;
use crate::graph::MixingMatrix;
use crate::problems::LocalObjectives;
use crate::seed::{self, label, SimRng};
use crate::{Error, Result};

pub use trace::{ErrorVector, Trace};

/// Rows per batch above which compression fans out over the rayon pool.
const PAR_THRESHOLD: usize = 1 << 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgtConfig {
    /// Consensus step size in `(0, 1]`.
    pub gamma: f64,
    /// Per-agent step sizes, the diagonal of `D`.
    pub eta: Vec<f64>,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub spec_x: CompressorSpec,
    pub spec_y: CompressorSpec,
    /// Iteration budget `K`.
    pub iterations: usize,
    pub seed: u64,
}

impl CgtConfig {
    /// Uniform step size, the same operator on both variables, `alpha = 1`.
    pub fn uniform(n: usize, gamma: f64, eta: f64, spec: CompressorSpec, iterations: usize, seed: u64) -> Self {
        CgtConfig {
            gamma,
            eta: vec![eta; n],
            alpha_x: 1.0,
            alpha_y: 1.0,
            spec_x: spec.clone(),
            spec_y: spec,
            iterations,
            seed,
        }
    }

    /// Uncompressed gradient tracking: identity operators, `gamma = 1`.
    pub fn gradient_tracking(n: usize, p: usize, eta: f64, iterations: usize, seed: u64) -> Self {
        CgtConfig::uniform(n, 1.0, eta, CompressorSpec::identity(p), iterations, seed)
    }

    pub fn eta_hat(&self) -> f64 {
        self.eta.iter().copied().fold(0.0, f64::max)
    }

    pub fn eta_bar(&self) -> f64 {
        self.eta.iter().sum::<f64>() / self.eta.len() as f64
    }

    /// Largest `M` with `eta_bar >= M eta_hat`.
    pub fn heterogeneity(&self) -> f64 {
        self.eta_bar() / self.eta_hat()
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.eta.len() != n {
            return bad(format!("expected {n} step sizes, got {}", self.eta.len()));
        }
        if let Some(e) = self.eta.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("step sizes must be positive, got {e}"));
        }
        for (name, a) in [("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y)] {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {a}"));
            }
        }
        if self.spec_x.dim() != p || self.spec_y.dim() != p {
            return Err(Error::Dimension(format!(
                "compressors built for p = {} / {}, problem has p = {p}",
                self.spec_x.dim(),
                self.spec_y.dim()
            )));
        }
        Ok(())
    }

    /// The theory asks for `alpha_x, alpha_y in (0, 1/r]`, with `r` the
    /// certified scaling of the respective operator.
    pub fn check_alpha(&self, r_x: f64, r_y: f64) -> Result<()> {
        for (name, a, r) in [("alpha_x", self.alpha_x, r_x), ("alpha_y", self.alpha_y, r_y)] {
            if !(a > 0.0 && a * r <= 1.0 + 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {a} exceeds 1/r = {}",
                    1.0 / r
                )));
            }
        }
        Ok(())
    }
}

/// Full algorithm state at iteration `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CgtState {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub hx: Array2<f64>,
    pub hy: Array2<f64>,
    pub hxw: Array2<f64>,
    pub hyw: Array2<f64>,
    /// `grad F(x)`, cached for the tracker update.
    pub grad: Array2<f64>,
    pub k: u64,
    pub bits_cum: u64,
}

impl CgtState {
    /// Largest entry of `|1^T Y - 1^T grad F(X)|`.
    pub fn tracking_deviation(&self) -> f64 {
        let y_sum = self.y.sum_axis(Axis(0));
        let g_sum = self.grad.sum_axis(Axis(0));
        y_sum
            .iter()
            .zip(g_sum.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-row compression randomness keyed by `(iteration, agent)`, so rows can
/// be compressed in any order and a longer run replays a shorter one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionStream {
    seed: u64,
}

impl CompressionStream {
    pub fn new(seed: u64) -> Self {
        CompressionStream { seed }
    }

    pub fn row_rng(&self, k: u64, agent: usize) -> SimRng {
        seed::rng_from(self.seed, &[k, agent as u64])
    }
}

/// Output of one COMM call.
#[derive(Debug, Clone)]
pub struct CommOutput {
    pub z_hat: Array2<f64>,
    pub z_hat_w: Array2<f64>,
    pub h: Array2<f64>,
    pub h_w: Array2<f64>,
    pub bits: u64,
}

fn compress_batch(
    spec: &CompressorSpec,
    diff: ArrayView2<'_, f64>,
    stream: &CompressionStream,
    k: u64,
) -> Result<(Array2<f64>, u64)> {
    let (n, p) = diff.dim();
    if n * p < PAR_THRESHOLD {
        let msg = spec.compress_rows(diff, |i| stream.row_rng(k, i))?;
        return Ok((msg.payload, msg.bits));
    }
    let diff = diff.as_standard_layout();
    let src = diff.as_slice().expect("standard layout");
    let mut payload = vec![0.0; n * p];
    let bits = payload
        .par_chunks_mut(p)
        .zip(src.par_chunks(p))
        .enumerate()
        .map(|(i, (out, row))| spec.compress_into(row, out, &mut stream.row_rng(k, i)))
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum();
    let payload = Array2::from_shape_vec((n, p), payload).expect("shape matches");
    Ok((payload, bits))
}

/// The COMM procedure: compress `Z - H`, reconstruct `Z^ = H + Q` and the
/// mixed copy `Z^_w = H_w + W Q`, then move both references toward them
/// with weight `alpha`.
pub fn comm(
    z: ArrayView2<'_, f64>,
    h: ArrayView2<'_, f64>,
    h_w: ArrayView2<'_, f64>,
    spec: &CompressorSpec,
    alpha: f64,
    mixing: &MixingMatrix,
    stream: &CompressionStream,
    k: u64,
) -> Result<CommOutput> {
    if z.dim() != h.dim() || z.dim() != h_w.dim() || z.nrows() != mixing.n() {
        return Err(Error::Dimension(format!(
            "comm got Z {:?}, H {:?}, H_w {:?} for n = {}",
            z.dim(),
            h.dim(),
            h_w.dim(),
            mixing.n()
        )));
    }
    let diff = &z - &h;
    let (q, bits) = compress_batch(spec, diff.view(), stream, k)?;
    let z_hat = &h + &q;
    let wq = match spec.support_size() {
        Some(k) if 4 * k <= spec.dim() => {
            let support: Vec<Vec<usize>> = q
                .rows()
                .into_iter()
                .map(|row| row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, _)| c).collect())
                .collect();
            mixing.apply_sparse(q.view(), &support)
        }
        _ => mixing.apply(q.view()),
    };
    let z_hat_w = &h_w + &wq;
    let h_next = &h * (1.0 - alpha) + &z_hat * alpha;
    let h_w_next = &h_w * (1.0 - alpha) + &z_hat_w * alpha;
    Ok(CommOutput {
        z_hat,
        z_hat_w,
        h: h_next,
        h_w: h_w_next,
        bits,
    })
}

/// Reconstructed variables from one iteration, for inspection.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub x_hat: Array2<f64>,
    pub x_hat_w: Array2<f64>,
    pub y_hat: Array2<f64>,
    pub y_hat_w: Array2<f64>,
    pub errors: ErrorVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_iter: usize,
    /// Stop as soon as `omega_o <= tol`.
    pub tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: CgtState,
    pub trace: Trace,
}

/// Binds a problem, a mixing matrix and a config into a runnable engine.
pub struct Engine<'a, P: LocalObjectives> {
    problem: &'a P,
    mixing: &'a MixingMatrix,
    config: &'a CgtConfig,
    stream_x: CompressionStream,
    stream_y: CompressionStream,
}

impl<'a, P: LocalObjectives> Engine<'a, P> {
    pub fn new(problem: &'a P, mixing: &'a MixingMatrix, config: &'a CgtConfig) -> Result<Self> {
        let (n, p) = (problem.agents(), problem.dim());
        if mixing.n() != n {
            return Err(Error::Dimension(format!(
                "mixing matrix is {0}x{0}, problem has {n} agents",
                mixing.n()
            )));
        }
        config.validate(n, p)?;
        Ok(Engine {
            problem,
            mixing,
            config,
            stream_x: CompressionStream::new(seed::derive_seed(config.seed, &[label::COMPRESS_X])),
            stream_y: CompressionStream::new(seed::derive_seed(config.seed, &[label::COMPRESS_Y])),
        })
    }

    pub fn config(&self) -> &CgtConfig {
        self.config
    }

    /// `X^0 ~ U[0, 1]^{n x p}`, `H_x = H_y = 0`, `Y^0 = grad F(X^0)`,
    /// `H_{x,w} = W H_x`, `H_{y,w} = W H_y`.
    pub fn init(&self) -> CgtState {
        let (n, p) = (self.problem.agents(), self.problem.dim());
        let mut rng = seed::rng_from(self.config.seed, &[label::INIT_X]);
        let x = Array2::from_shape_simple_fn((n, p), || rng.random::<f64>());
        self.init_from(x)
    }

    /// Same as [`Engine::init`] with a caller-supplied `X^0`.
    pub fn init_from(&self, x: Array2<f64>) -> CgtState {
        let grad = self.problem.batch_gradient(x.view());
        let hx = Array2::zeros(x.raw_dim());
        let hy = Array2::zeros(x.raw_dim());
        CgtState {
            hxw: self.mixing.apply(hx.view()),
            hyw: self.mixing.apply(hy.view()),
            y: grad.clone(),
            grad,
            x,
            hx,
            hy,
            k: 0,
            bits_cum: 0,
        }
    }

    pub fn measure(&self, state: &CgtState) -> ErrorVector {
        ErrorVector::measure(state, self.problem.optimum())
    }

    pub fn step(&self, state: &mut CgtState) -> Result<ErrorVector> {
        self.step_recorded(state).map(|r| r.errors)
    }

    /// One iteration; returns the reconstructed variables alongside the
    /// errors measured on the new state.
    pub fn step_recorded(&self, state: &mut CgtState) -> Result<StepRecord> {
        let cfg = self.config;
        let k = state.k;
        let diverged = |variable| Error::Divergence { k, variable };
        let cx = comm(
            state.x.view(),
            state.hx.view(),
            state.hxw.view(),
            &cfg.spec_x,
            cfg.alpha_x,
            self.mixing,
            &self.stream_x,
            k,
        )
        .map_err(|e| match e {
            Error::NonFiniteInput { .. } => diverged("X - H_x"),
            other => other,
        })?;
        let cy = comm(
            state.y.view(),
            state.hy.view(),
            state.hyw.view(),
            &cfg.spec_y,
            cfg.alpha_y,
            self.mixing,
            &self.stream_y,
            k,
        )
        .map_err(|e| match e {
            Error::NonFiniteInput { .. } => diverged("Y - H_y"),
            other => other,
        })?;

        let gamma = cfg.gamma;
        let mut x_next = state.x.clone();
        Zip::from(x_next.rows_mut())
            .and(cx.z_hat.rows())
            .and(cx.z_hat_w.rows())
            .and(state.y.rows())
            .and(&cfg.eta)
            .for_each(|mut x, xh, xw, y, &eta| {
                Zip::from(&mut x).and(xh).and(xw).and(y).for_each(|x, &a, &b, &y| {
                    *x -= gamma * (a - b) + eta * y;
                });
            });
        if !x_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { k: k + 1, variable: "X" });
        }
        let grad_next = self.problem.batch_gradient(x_next.view());
        let mut y_next = state.y.clone();
        Zip::from(&mut y_next)
            .and(&cy.z_hat)
            .and(&cy.z_hat_w)
            .and(&grad_next)
            .and(&state.grad)
            .for_each(|y, &a, &b, &g1, &g0| {
                *y += -gamma * (a - b) + g1 - g0;
            });
        if !y_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { k: k + 1, variable: "Y" });
        }

        state.x = x_next;
        state.y = y_next;
        state.grad = grad_next;
        state.hx = cx.h;
        state.hxw = cx.h_w;
        state.hy = cy.h;
        state.hyw = cy.h_w;
        state.k = k + 1;
        state.bits_cum += cx.bits + cy.bits;
        Ok(StepRecord {
            errors: self.measure(state),
            x_hat: cx.z_hat,
            x_hat_w: cx.z_hat_w,
            y_hat: cy.z_hat,
            y_hat_w: cy.z_hat_w,
        })
    }

    /// Iterates from [`Engine::init`] until the budget is spent or the
    /// optimization error reaches the tolerance.
    pub fn run(&self, stop: StopRule) -> Result<RunOutput> {
        self.run_from(self.init(), stop)
    }

    pub fn run_from(&self, mut state: CgtState, stop: StopRule) -> Result<RunOutput> {
        let mut trace = Trace::new(self.measure(&state));
        for _ in 0..stop.max_iter {
            let e = self.step(&mut state)?;
            let done = stop.tol.is_some_and(|t| e.omega_o <= t);
            trace.push(e);
            if done {
                break;
            }
        }
        Ok(RunOutput { state, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_topology, metropolis_weights, TopologyKind};
    use crate::problems::{generate_ridge, RidgeParams, RidgeProblem};
    use ndarray::Array1;

    fn small() -> (RidgeProblem, MixingMatrix) {
        let prob = generate_ridge(RidgeParams {
            n: 6,
            p: 8,
            rho: 0.1,
            noise_std: 1.0,
            seed: 4,
        })
        .unwrap();
        let topo = make_topology(TopologyKind::Ring, 6, 0).unwrap();
        (prob, metropolis_weights(&topo))
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn init_satisfies_tracking_and_zero_references() {
        let (prob, w) = small();
        let cfg = CgtConfig::uniform(6, 0.1, 0.01, CompressorSpec::parse("topk:2", 8).unwrap(), 10, 3);
        let engine = Engine::new(&prob, &w, &cfg).unwrap();
        let s = engine.init();
        assert_eq!(s.tracking_deviation(), 0.0);
        assert!(s.hxw.iter().all(|v| *v == 0.0));
        assert!(s.hyw.iter().all(|v| *v == 0.0));
        assert!(s.x.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(s, engine.init());
    }

    #[test]
    fn identity_comm_reconstructs_exactly() {
        let (_, w) = small();
        let spec = CompressorSpec::identity(8);
        let z = Array2::from_shape_fn((6, 8), |(i, j)| (i as f64 - j as f64) * 0.3);
        let h = Array2::from_shape_fn((6, 8), |(i, j)| ((i * j) % 5) as f64);
        let hw = w.apply(h.view());
        let out = comm(z.view(), h.view(), hw.view(), &spec, 0.5, &w, &CompressionStream::new(0), 0).unwrap();
        assert!(max_abs_diff(&out.z_hat, &z) < 1e-14);
        assert!(max_abs_diff(&out.z_hat_w, &w.apply(z.view())) < 1e-13);
        assert_eq!(out.bits, 6 * 32 * 8);
    }

    #[test]
    fn comm_at_reference_changes_nothing() {
        let (_, w) = small();
        let spec = CompressorSpec::parse("qt:b=2,q=inf,k=3", 8).unwrap();
        let h = Array2::from_shape_fn((6, 8), |(i, j)| (i + 2 * j) as f64);
        let hw = w.apply(h.view());
        for alpha in [0.3, 1.0] {
            let out = comm(h.view(), h.view(), hw.view(), &spec, alpha, &w, &CompressionStream::new(1), 5).unwrap();
            assert_eq!(out.z_hat, h);
            assert!(max_abs_diff(&out.h, &h) < 1e-12);
            assert!(max_abs_diff(&out.h_w, &hw) < 1e-12);
        }
    }

    #[test]
    fn comm_rejects_shape_mismatch() {
        let (_, w) = small();
        let spec = CompressorSpec::identity(8);
        let a = Array2::zeros((6, 8));
        let b = Array2::zeros((5, 8));
        assert!(comm(a.view(), b.view(), a.view(), &spec, 1.0, &w, &CompressionStream::new(0), 0).is_err());
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let (prob, w) = small();
        let cfg = CgtConfig::uniform(6, 1.0, 5.0, CompressorSpec::identity(8), 10_000, 0);
        let engine = Engine::new(&prob, &w, &cfg).unwrap();
        let err = engine.run(StopRule { max_iter: 10_000, tol: None }).unwrap_err();
        match err {
            Error::Divergence { k, .. } => assert!(k > 0 && k < 10_000),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_validation() {
        let (prob, w) = small();
        let spec = CompressorSpec::identity(8);
        let mut cfg = CgtConfig::uniform(6, 0.5, 0.01, spec.clone(), 1, 0);
        cfg.gamma = 0.0;
        assert!(Engine::new(&prob, &w, &cfg).is_err());
        cfg.gamma = 1.5;
        assert!(Engine::new(&prob, &w, &cfg).is_err());
        cfg.gamma = 0.5;
        cfg.eta = vec![0.01; 5];
        assert!(Engine::new(&prob, &w, &cfg).is_err());
        cfg.eta = vec![0.01; 6];
        cfg.alpha_y = 0.0;
        assert!(Engine::new(&prob, &w, &cfg).is_err());
        cfg.alpha_y = 1.0;
        cfg.spec_x = CompressorSpec::identity(9);
        assert!(Engine::new(&prob, &w, &cfg).is_err());
        cfg.spec_x = spec;
        assert!(Engine::new(&prob, &w, &cfg).is_ok());
        assert!(cfg.check_alpha(1.0, 1.0).is_ok());
        assert!(cfg.check_alpha(2.0, 1.0).is_err());
    }

    #[test]
    fn heterogeneity_of_step_sizes() {
        let mut cfg = CgtConfig::uniform(4, 0.5, 0.01, CompressorSpec::identity(2), 1, 0);
        assert_eq!(cfg.heterogeneity(), 1.0);
        cfg.eta = vec![0.01, 0.02, 0.03, 0.04];
        assert_eq!(cfg.eta_hat(), 0.04);
        assert!((cfg.heterogeneity() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_keep_init() {
        let (prob, w) = small();
        let cfg = CgtConfig::uniform(6, 0.1, 0.01, CompressorSpec::identity(8), 0, 1);
        let engine = Engine::new(&prob, &w, &cfg).unwrap();
        let out = engine.run(StopRule { max_iter: 0, tol: None }).unwrap();
        assert!(out.trace.steps().is_empty());
        assert_eq!(out.state, engine.init());
        let x_bar: Array1<f64> = out.state.x.mean_axis(Axis(0)).unwrap();
        let d = &x_bar - &prob.optimum();
        assert_eq!(out.trace.initial().omega_o, d.dot(&d));
    }

    #[test]
    fn parallel_and_serial_compression_agree() {
        let spec = CompressorSpec::parse("quant:b=2,q=inf", 512).unwrap();
        let diff = Array2::from_shape_fn((20, 512), |(i, j)| ((i * 512 + j) as f64 * 0.618).sin());
        let stream = CompressionStream::new(77);
        let (par, bits) = compress_batch(&spec, diff.view(), &stream, 3).unwrap();
        let serial = spec.compress_rows(diff.view(), |i| stream.row_rng(3, i)).unwrap();
        assert_eq!(par, serial.payload);
        assert_eq!(bits, serial.bits);
    }
}
