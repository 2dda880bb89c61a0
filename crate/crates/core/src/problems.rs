//! Strongly convex local objectives.
//!
//! The shipped instance is distributed ridge regression with one sample per
//! agent:
//!
//! ```text
//! f_i(x) = (u_i^T x - v_i)^2 + rho ||x||^2
//! grad f_i(x) = 2 (u_i^T x - v_i) u_i + 2 rho x
//! ```
//!
//! The Hessian `2 u_i u_i^T + 2 rho I` has extreme eigenvalues `2 rho` and
//! `2 ||u_i||^2 + 2 rho`, which are used as exact `mu_i` and `L_i`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::{self, label};
use crate::{Error, Result};

const MAX_CONDITION: f64 = 1e12;

/// A family of local objectives `f_1..f_n` over `R^p` with known constants.
pub trait LocalObjectives: Sync {
    fn agents(&self) -> usize;

    fn dim(&self) -> usize;

    /// Writes `grad f_i(x)` into `out`.
    fn local_gradient_into(&self, i: usize, x: ArrayView1<'_, f64>, out: &mut [f64]);

    /// `mu = (1/n) sum mu_i`.
    fn mu(&self) -> f64;

    /// `L = max L_i`.
    fn smoothness(&self) -> f64;

    /// Minimizer of the average objective.
    fn optimum(&self) -> ArrayView1<'_, f64>;

    fn kappa(&self) -> f64 {
        self.smoothness() / self.mu()
    }

    fn local_gradient(&self, i: usize, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = vec![0.0; self.dim()];
        self.local_gradient_into(i, x, &mut out);
        Array1::from(out)
    }

    /// Row `i` of the result is `grad f_i(x_i)`.
    fn batch_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        let mut buf = vec![0.0; self.dim()];
        for (i, row) in x.outer_iter().enumerate() {
            self.local_gradient_into(i, row, &mut buf);
            out.row_mut(i)
                .iter_mut()
                .zip(&buf)
                .for_each(|(d, s)| *d = *s);
        }
        out
    }

    /// `grad f(x) = (1/n) sum_i grad f_i(x)`.
    fn average_gradient(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.agents();
        let mut acc = Array1::zeros(self.dim());
        let mut buf = vec![0.0; self.dim()];
        for i in 0..n {
            self.local_gradient_into(i, x, &mut buf);
            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
        }
        acc / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeParams {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for RidgeParams {
    fn default() -> Self {
        RidgeParams {
            n: 100,
            p: 500,
            rho: 0.1,
            noise_std: 5.0,
            seed: 1,
        }
    }
}

/// Ridge regression data plus its exact constants and optimum.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    params: RidgeParams,
    features: Array2<f64>,
    targets: Array1<f64>,
    x_star: Array1<f64>,
    mu_i: Vec<f64>,
    l_i: Vec<f64>,
    mu: f64,
    l: f64,
}

/// Replayable snapshot: the raw data and the generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSnapshot {
    pub params: RidgeParams,
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
}

/// Draws `u_i ~ U[-1, 1]^p`, places the ground truth of agent `i` at the
/// constant vector `i / (n - 1)`, and sets `v_i = u_i^T x~_i + eps_i` with
/// `eps_i ~ N(0, noise_std^2)`.
pub fn generate_ridge(params: RidgeParams) -> Result<RidgeProblem> {
    let RidgeParams {
        n,
        p,
        rho,
        noise_std,
        seed,
    } = params;
    if n < 2 || p < 1 {
        return Err(Error::InvalidProblem(format!("need n >= 2 and p >= 1, got n = {n}, p = {p}")));
    }
    if !(rho > 0.0) || !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidProblem(format!(
            "need rho > 0 and noise_std >= 0, got rho = {rho}, noise_std = {noise_std}"
        )));
    }
    let mut rng = seed::rng_from(seed, &[label::PROBLEM]);
    let features = Array2::from_shape_simple_fn((n, p), || rng.random_range(-1.0..=1.0));
    let noise = Normal::new(0.0, noise_std).expect("finite nonnegative std");
    let targets = Array1::from_iter(features.outer_iter().enumerate().map(|(i, u)| {
        let truth = i as f64 / (n - 1) as f64;
        truth * u.sum() + noise.sample(&mut rng)
    }));
    RidgeProblem::from_data(params, features, targets)
}

impl RidgeProblem {
    /// Builds the instance from raw data, solving
    /// `(sum u_i u_i^T + n rho I) x* = sum u_i v_i` by Cholesky.
    pub fn from_data(params: RidgeParams, features: Array2<f64>, targets: Array1<f64>) -> Result<Self> {
        let (n, p) = features.dim();
        if targets.len() != n || n != params.n || p != params.p {
            return Err(Error::Dimension(format!(
                "features {n}x{p}, targets {}, params n = {}, p = {}",
                targets.len(),
                params.n,
                params.p
            )));
        }
        let rho = params.rho;
        let sq_norms: Vec<f64> = features.outer_iter().map(|u| u.dot(&u)).collect();
        // lambda_min >= n rho and lambda_max <= sum ||u_i||^2 + n rho
        let shift = n as f64 * rho;
        let cond_bound = (sq_norms.iter().sum::<f64>() + shift) / shift;
        if !(cond_bound <= MAX_CONDITION) {
            return Err(Error::InvalidProblem(format!(
                "regularized Gram matrix condition bound {cond_bound:e} exceeds {MAX_CONDITION:e}"
            )));
        }
        let u = DMatrix::from_fn(n, p, |i, j| features[[i, j]]);
        let mut gram = u.transpose() * &u;
        for j in 0..p {
            gram[(j, j)] += shift;
        }
        let rhs = u.transpose() * DVector::from_iterator(n, targets.iter().copied());
        let x_star = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidProblem("regularized Gram matrix not positive definite".into()))?
            .solve(&rhs);
        let mu_i = vec![2.0 * rho; n];
        let l_i: Vec<f64> = sq_norms.iter().map(|s| 2.0 * s + 2.0 * rho).collect();
        Ok(RidgeProblem {
            params,
            mu: mu_i.iter().sum::<f64>() / n as f64,
            l: l_i.iter().copied().fold(0.0, f64::max),
            features,
            targets,
            x_star: Array1::from_iter(x_star.iter().copied()),
            mu_i,
            l_i,
        })
    }

    pub fn params(&self) -> RidgeParams {
        self.params
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn targets(&self) -> &Array1<f64> {
        &self.targets
    }

    pub fn rho(&self) -> f64 {
        self.params.rho
    }

    pub fn mu_i(&self) -> &[f64] {
        &self.mu_i
    }

    pub fn l_i(&self) -> &[f64] {
        &self.l_i
    }

    /// `f_i(x)`.
    pub fn local_value(&self, i: usize, x: ArrayView1<'_, f64>) -> f64 {
        let u = self.features.row(i);
        let r = u.dot(&x) - self.targets[i];
        r * r + self.params.rho * x.dot(&x)
    }

    /// `f(x) = (1/n) sum f_i(x)`.
    pub fn value(&self, x: ArrayView1<'_, f64>) -> f64 {
        let n = self.params.n;
        (0..n).map(|i| self.local_value(i, x)).sum::<f64>() / n as f64
    }

    pub fn snapshot(&self) -> RidgeSnapshot {
        RidgeSnapshot {
            params: self.params,
            features: self.features.clone(),
            targets: self.targets.clone(),
        }
    }

    pub fn from_snapshot(s: RidgeSnapshot) -> Result<Self> {
        RidgeProblem::from_data(s.params, s.features, s.targets)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: RidgeSnapshot = serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "problem snapshot".into(),
            message: e.to_string(),
        })?;
        RidgeProblem::from_snapshot(snap)
    }
}

impl LocalObjectives for RidgeProblem {
    fn agents(&self) -> usize {
        self.params.n
    }

    fn dim(&self) -> usize {
        self.params.p
    }

    fn local_gradient_into(&self, i: usize, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        let u = self.features.row(i);
        let resid = 2.0 * (u.dot(&x) - self.targets[i]);
        let two_rho = 2.0 * self.params.rho;
        for ((o, &ui), &xi) in out.iter_mut().zip(u.iter()).zip(x.iter()) {
            *o = resid * ui + two_rho * xi;
        }
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> f64 {
        self.l
    }

    fn optimum(&self) -> ArrayView1<'_, f64> {
        self.x_star.view()
    }

    fn batch_gradient(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        // (2 (u_i . x_i - v_i)) u_i + 2 rho x_i, vectorized over rows
        let resid = (&self.features * &x).sum_axis(Axis(1)) - &self.targets;
        let scaled = &self.features * &(resid * 2.0).insert_axis(Axis(1));
        scaled + &x * (2.0 * self.params.rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn desk() -> RidgeProblem {
        generate_ridge(RidgeParams {
            n: 20,
            p: 50,
            rho: 0.1,
            noise_std: 5.0,
            seed: 1,
        })
        .unwrap()
    }

    fn norm(v: &Array1<f64>) -> f64 {
        v.dot(v).sqrt()
    }

    #[test]
    fn optimum_has_vanishing_average_gradient() {
        let prob = desk();
        let g = prob.average_gradient(prob.optimum());
        assert!(norm(&g) <= 1e-8, "|grad f(x*)| = {}", norm(&g));
    }

    #[test]
    fn constants_are_consistent() {
        let prob = desk();
        assert_abs_diff_eq!(prob.mu(), 0.2, epsilon = 1e-15);
        assert!(prob.smoothness() >= prob.mu());
        assert!(prob.kappa() >= 1.0);
        for (u, l) in prob.features().outer_iter().zip(prob.l_i()) {
            assert_abs_diff_eq!(*l, 2.0 * u.dot(&u) + 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_gradient_at_ground_truth() {
        let prob = generate_ridge(RidgeParams {
            n: 5,
            p: 4,
            rho: 0.3,
            noise_std: 0.0,
            seed: 3,
        })
        .unwrap();
        for i in 0..5 {
            let truth = Array1::from_elem(4, i as f64 / 4.0);
            let g = prob.local_gradient(i, truth.view());
            for v in g.iter() {
                assert_abs_diff_eq!(*v, 2.0 * 0.3 * i as f64 / 4.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_at_zero() {
        let prob = desk();
        let zero = Array1::zeros(50);
        for i in [0, 7, 19] {
            let g = prob.local_gradient(i, zero.view());
            let expect = prob.features().row(i).to_owned() * (-2.0 * prob.targets()[i]);
            for (a, b) in g.iter().zip(expect.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let prob = desk();
        let x = Array1::from_shape_fn(50, |j| (j as f64 * 0.37).sin());
        let h = 1e-5;
        for i in [0, 11] {
            let g = prob.local_gradient(i, x.view());
            for j in [0, 13, 49] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (prob.local_value(i, xp.view()) - prob.local_value(i, xm.view())) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn batch_gradient_rows_are_local_gradients() {
        let prob = desk();
        let x = Array2::from_shape_fn((20, 50), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 13.0);
        let batch = prob.batch_gradient(x.view());
        let generic = LocalObjectives::batch_gradient(&GenericOnly(&prob), x.view());
        for i in 0..20 {
            let g = prob.local_gradient(i, x.row(i));
            for j in 0..50 {
                assert_abs_diff_eq!(batch[[i, j]], g[j], epsilon = 1e-12);
                assert_abs_diff_eq!(generic[[i, j]], g[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn consensual_batch_mean_is_average_gradient() {
        let prob = desk();
        let xbar = Array1::from_shape_fn(50, |j| j as f64 / 50.0);
        let x = Array2::from_shape_fn((20, 50), |(_, j)| xbar[j]);
        let mean = prob.batch_gradient(x.view()).mean_axis(Axis(0)).unwrap();
        let avg = prob.average_gradient(xbar.view());
        for (a, b) in mean.iter().zip(avg.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let at_opt = Array2::from_shape_fn((20, 50), |(_, j)| prob.optimum()[j]);
        let m = prob.batch_gradient(at_opt.view()).mean_axis(Axis(0)).unwrap();
        assert!(norm(&m) <= 1e-8);
    }

    #[test]
    fn single_row_change_is_local() {
        let prob = desk();
        let x = Array2::from_elem((20, 50), 0.25);
        let mut y = x.clone();
        y.row_mut(4).fill(-1.0);
        let gx = prob.batch_gradient(x.view());
        let gy = prob.batch_gradient(y.view());
        for i in 0..20 {
            let same = gx.row(i) == gy.row(i);
            assert_eq!(same, i != 4);
        }
    }

    #[test]
    fn heavy_regularization_shrinks_optimum() {
        let prob = generate_ridge(RidgeParams {
            n: 10,
            p: 8,
            rho: 1e4,
            noise_std: 1.0,
            seed: 2,
        })
        .unwrap();
        let rhs = prob.features().t().dot(prob.targets());
        let bound = norm(&rhs) / (10.0 * 1e4);
        let xs = prob.optimum().to_owned();
        assert!(norm(&xs) <= bound);
    }

    #[test]
    fn rejects_bad_params() {
        let base = RidgeParams::default();
        assert!(generate_ridge(RidgeParams { n: 1, ..base }).is_err());
        assert!(generate_ridge(RidgeParams { rho: 0.0, ..base }).is_err());
        assert!(generate_ridge(RidgeParams { noise_std: -1.0, ..base }).is_err());
        assert!(generate_ridge(RidgeParams { rho: 1e-15, n: 4, p: 3, ..base }).is_err());
    }

    #[test]
    fn snapshot_replays_exactly() {
        let prob = desk();
        let back = RidgeProblem::from_json(&prob.to_json()).unwrap();
        assert_eq!(back.features(), prob.features());
        assert_eq!(back.targets(), prob.targets());
        assert_eq!(back.optimum(), prob.optimum());
        let again = generate_ridge(prob.params()).unwrap();
        assert_eq!(again.snapshot(), prob.snapshot());
    }

    /// Hides the vectorized override so the trait's default path is tested.
    struct GenericOnly<'a>(&'a RidgeProblem);

    impl LocalObjectives for GenericOnly<'_> {
        fn agents(&self) -> usize {
            self.0.agents()
        }
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn local_gradient_into(&self, i: usize, x: ArrayView1<'_, f64>, out: &mut [f64]) {
            self.0.local_gradient_into(i, x, out)
        }
        fn mu(&self) -> f64 {
            self.0.mu()
        }
        fn smoothness(&self) -> f64 {
            self.0.smoothness()
        }
        fn optimum(&self) -> ArrayView1<'_, f64> {
            self.0.optimum()
        }
    }
}
