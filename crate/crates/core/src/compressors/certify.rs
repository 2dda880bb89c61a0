use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CompressorKind, CompressorSpec};
use crate::{Error, Result};

pub const MIN_TRIALS: usize = 10_000;

/// Inflation applied to empirical maxima of the variance ratio.
const SAFETY: f64 = 1.1;
const GOLDEN_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsSource {
    Analytic,
    Empirical,
}

/// Constants `(C, delta, r)` of the general compression condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressorConstants {
    pub c: f64,
    pub delta: f64,
    pub r: f64,
    pub source: ConstantsSource,
}

impl CompressorConstants {
    pub const IDENTITY: CompressorConstants = CompressorConstants {
        c: 0.0,
        delta: 1.0,
        r: 1.0,
        source: ConstantsSource::Analytic,
    };
}

/// Per-sample statistics on a unit test vector `x`: `a = ||C(x)||^2`,
/// `b = <C(x), x>`. Then `||C(x)/r - x||^2 = a/r^2 - 2b/r + 1`.
struct Sample {
    a: f64,
    b: f64,
}

impl Sample {
    fn ratio(&self, inv_r: f64) -> f64 {
        self.a * inv_r * inv_r - 2.0 * self.b * inv_r + 1.0
    }
}

fn unit_vector<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return x.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn draw_samples<R: Rng + ?Sized>(spec: &CompressorSpec, trials: usize, rng: &mut R) -> Result<Vec<Sample>> {
    let p = spec.dim();
    let mut out = vec![0.0; p];
    (0..trials)
        .map(|_| {
            let x = unit_vector(p, rng);
            spec.compress_into(&x, &mut out, rng)?;
            Ok(Sample {
                a: out.iter().map(|v| v * v).sum(),
                b: out.iter().zip(&x).map(|(c, v)| c * v).sum(),
            })
        })
        .collect()
}

fn worst(samples: &[Sample], inv_r: f64) -> f64 {
    samples
        .iter()
        .map(|s| s.ratio(inv_r))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Minimizes the worst-case contraction ratio over `1/r`. Each sample's ratio
/// is a convex quadratic in `1/r`, so their maximum is convex and a golden
/// section search on `[0, t_max]` finds the minimizer.
fn best_scaling(samples: &[Sample]) -> (f64, f64) {
    let t_max = samples
        .iter()
        .filter(|s| s.a > 0.0)
        .map(|s| 2.0 * s.b / s.a)
        .fold(0.0_f64, f64::max);
    if t_max <= 0.0 {
        return (f64::INFINITY, 1.0);
    }
    let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (0.0, t_max);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (worst(samples, x1), worst(samples, x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = worst(samples, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = worst(samples, x2);
        }
    }
    let t = 0.5 * (lo + hi);
    (1.0 / t, worst(samples, t))
}

/// Establishes `(C, delta, r)` for `spec`.
///
/// Top-k and Random-k use `C = 1 - k/p`, `delta = k/p`, `r = 1`; the identity
/// is exact. The unbiased quantizer estimates `C` as the worst observed
/// variance ratio over unit test vectors (times 1.1) and sets `r = C + 1`,
/// `delta = 1 / (C + 1)`. Everything else estimates `C` the same way and
/// picks `r` by line search on the worst observed contraction ratio.
pub fn certify_constants<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    trials: usize,
    rng: &mut R,
) -> Result<CompressorConstants> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "certification needs at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let p = spec.dim() as f64;
    match spec.kind() {
        CompressorKind::Identity => return Ok(CompressorConstants::IDENTITY),
        CompressorKind::TopK { k } | CompressorKind::RandomK { k } => {
            let frac = *k as f64 / p;
            return Ok(CompressorConstants {
                c: 1.0 - frac,
                delta: frac,
                r: 1.0,
                source: ConstantsSource::Analytic,
            });
        }
        _ => {}
    }

    let samples = draw_samples(spec, trials, rng)?;
    let c = SAFETY * worst(&samples, 1.0).max(0.0);
    let (r, delta) = match spec.kind() {
        CompressorKind::Quantize { .. } => (c + 1.0, 1.0 / (c + 1.0)),
        _ => {
            let (r, worst_ratio) = best_scaling(&samples);
            (r, 1.0 - worst_ratio)
        }
    };
    if !(delta > 0.0) || !r.is_finite() {
        return Err(Error::NotContractive { delta });
    }
    Ok(CompressorConstants {
        c,
        delta: delta.min(1.0),
        r,
        source: ConstantsSource::Empirical,
    })
}

/// Sample means of `||C(x) - x||^2 / ||x||^2` and `||C(x)/r - x||^2 / ||x||^2`
/// over fresh unit test vectors.
pub fn empirical_ratios<R: Rng + ?Sized>(
    spec: &CompressorSpec,
    r: f64,
    trials: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let samples = draw_samples(spec, trials, rng)?;
    let n = samples.len() as f64;
    let var = samples.iter().map(|s| s.ratio(1.0)).sum::<f64>() / n;
    let contract = samples.iter().map(|s| s.ratio(1.0 / r)).sum::<f64>() / n;
    Ok((var, contract))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SimRng;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn certify(s: &str, p: usize) -> CompressorConstants {
        let spec = CompressorSpec::parse(s, p).unwrap();
        certify_constants(&spec, MIN_TRIALS, &mut SimRng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn top_k_constants_are_analytic() {
        let c = certify("topk:10", 500);
        assert_abs_diff_eq!(c.c, 0.98, epsilon = 1e-15);
        assert_abs_diff_eq!(c.delta, 0.02, epsilon = 1e-15);
        assert_eq!(c.r, 1.0);
        assert_eq!(c.source, ConstantsSource::Analytic);
    }

    #[test]
    fn identity_constants() {
        assert_eq!(certify("identity", 7), CompressorConstants::IDENTITY);
    }

    #[test]
    fn too_few_trials_rejected() {
        let spec = CompressorSpec::parse("norm-sign:q=2", 5).unwrap();
        assert!(certify_constants(&spec, 10, &mut SimRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn quantizer_uses_unbiased_relation() {
        let c = certify("quant:b=2,q=inf", 500);
        assert!(c.c >= 1.0, "C = {}", c.c);
        assert_abs_diff_eq!(c.r, c.c + 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.delta, 1.0 / (c.c + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn certified_constants_bound_fresh_samples() {
        let mut rng = SimRng::seed_from_u64(5);
        for s in ["quant:b=2,q=inf", "norm-sign:q=2", "qt:b=2,q=inf,k=10"] {
            let spec = CompressorSpec::parse(s, 100).unwrap();
            let k = certify_constants(&spec, MIN_TRIALS, &mut rng).unwrap();
            let (var, contract) = empirical_ratios(&spec, k.r, MIN_TRIALS, &mut rng).unwrap();
            assert!(var <= k.c * 1.05, "{s}: mean var {var} vs C {}", k.c);
            assert!(contract <= (1.0 - k.delta) * 1.05, "{s}: {contract} vs {}", 1.0 - k.delta);
        }
    }

    #[test]
    fn golden_section_finds_the_quadratic_minimum() {
        // a single sample with a = 4, b = 1: minimum 1 - b^2/a = 0.75 at 1/r = 1/4
        let (r, w) = best_scaling(&[Sample { a: 4.0, b: 1.0 }]);
        assert_abs_diff_eq!(r, 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(w, 0.75, epsilon = 1e-12);
    }
}
