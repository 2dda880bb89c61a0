//! Compression operators.
//!
//! Every operator maps `R^p -> R^p`, fixes the zero vector and reports the
//! bit cost of its encoded payload. The cost model charges 32 bits per float
//! scalar, `ceil(log2 p)` bits per transmitted index and `b + 1` bits per
//! quantized magnitude with its sign.
//!
//! Operators are characterized by the constants of the general condition
//!
//! ```text
//! E ||C(x) - x||^2     <= C ||x||^2
//! E ||C(x) / r - x||^2 <= (1 - delta) ||x||^2
//! ```
//!
//! which [`certify_constants`] establishes analytically where possible and
//! empirically otherwise.

mod certify;
mod parse;

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use certify::{
    certify_constants, empirical_ratios, CompressorConstants, ConstantsSource, MIN_TRIALS,
};

/// Index `q` of the norm used by the quantizers and the norm-sign operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormIndex {
    Finite(f64),
    Inf,
}

impl NormIndex {
    pub fn norm(self, x: &[f64]) -> f64 {
        match self {
            NormIndex::Inf => x.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            NormIndex::Finite(q) if q == 1.0 => x.iter().map(|v| v.abs()).sum(),
            NormIndex::Finite(q) if q == 2.0 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            NormIndex::Finite(q) => x.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q),
        }
    }
}

impl fmt::Display for NormIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormIndex::Finite(q) => write!(f, "{q}"),
            NormIndex::Inf => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompressorKind {
    Identity,
    /// Unbiased stochastic `b`-bit quantizer relative to the `q`-norm.
    Quantize { bits: u32, norm: NormIndex },
    TopK { k: usize },
    /// `k` uniformly drawn coordinates, not rescaled (biased).
    RandomK { k: usize },
    /// `||x||_q sign(x)`.
    NormSign { norm: NormIndex },
    /// Top-k followed by the quantizer on the surviving entries.
    QuantizeSparsify { bits: u32, norm: NormIndex, k: usize },
    /// Inner operator divided by `r`.
    Rescaled { inner: Box<CompressorKind>, r: f64 },
}

/// An operator kind bound to a vector dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorSpec {
    kind: CompressorKind,
    dim: usize,
}

/// Output of one compression.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub values: Vec<f64>,
    pub bits: u64,
}

/// Row-wise compression of an `n x p` batch, one payload per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub payload: Array2<f64>,
    pub bits: u64,
}

fn index_bits(p: usize) -> u64 {
    u64::from(usize::BITS - p.saturating_sub(1).leading_zeros())
}

fn validate_kind(kind: &CompressorKind, dim: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidCompressor(msg));
    let check_norm = |norm: &NormIndex| match norm {
        NormIndex::Finite(q) if !(*q >= 1.0 && q.is_finite()) => {
            bad(format!("norm index must be >= 1 or inf, got {q}"))
        }
        _ => Ok(()),
    };
    let check_k = |k: usize| {
        if k == 0 || k > dim {
            bad(format!("need 1 <= k <= p = {dim}, got k = {k}"))
        } else {
            Ok(())
        }
    };
    let check_bits = |b: u32| {
        if b == 0 || b > 52 {
            bad(format!("quantizer bits must lie in 1..=52, got {b}"))
        } else {
            Ok(())
        }
    };
    match kind {
        CompressorKind::Identity => Ok(()),
        CompressorKind::Quantize { bits, norm } => {
            check_bits(*bits)?;
            check_norm(norm)
        }
        CompressorKind::TopK { k } | CompressorKind::RandomK { k } => check_k(*k),
        CompressorKind::NormSign { norm } => check_norm(norm),
        CompressorKind::QuantizeSparsify { bits, norm, k } => {
            check_bits(*bits)?;
            check_norm(norm)?;
            check_k(*k)
        }
        CompressorKind::Rescaled { inner, r } => {
            if !(*r > 0.0 && r.is_finite()) {
                return bad(format!("rescale factor must be positive, got {r}"));
            }
            validate_kind(inner, dim)
        }
    }
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCompressor("dimension must be positive".into()));
        }
        validate_kind(&kind, dim)?;
        Ok(CompressorSpec { kind, dim })
    }

    pub fn identity(dim: usize) -> Self {
        CompressorSpec::new(CompressorKind::Identity, dim).expect("identity is always valid")
    }

    /// Parses a config string such as `"topk:10"`, `"quant:b=2,q=inf"`,
    /// `"qt:b=2,q=inf,k=10"`, `"qt-rescaled:b=2,q=inf,k=10"`,
    /// `"norm-sign:q=2"` or `"identity"`.
    ///
    /// `qt-rescaled` without an explicit `r=` certifies the inner operator
    /// (fixed seed) and rescales by the certified `r`.
    pub fn parse(s: &str, dim: usize) -> Result<Self> {
        parse::parse(s, dim)
    }

    pub fn kind(&self) -> &CompressorKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, CompressorKind::Identity)
    }

    /// Number of entries the output may have nonzero, if fewer than `dim`.
    pub fn support_size(&self) -> Option<usize> {
        fn go(kind: &CompressorKind) -> Option<usize> {
            match kind {
                CompressorKind::TopK { k } | CompressorKind::RandomK { k } => Some(*k),
                CompressorKind::QuantizeSparsify { k, .. } => Some(*k),
                CompressorKind::Rescaled { inner, .. } => go(inner),
                _ => None,
            }
        }
        go(&self.kind)
    }

    /// Closed-form payload size in bits.
    pub fn bits(&self) -> u64 {
        kind_bits(&self.kind, self.dim)
    }

    /// Divides this operator's output by `r`.
    pub fn rescaled(&self, r: f64) -> Result<Self> {
        CompressorSpec::new(
            CompressorKind::Rescaled {
                inner: Box::new(self.kind.clone()),
                r,
            },
            self.dim,
        )
    }

    pub fn compress<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Compressed> {
        let mut values = vec![0.0; x.len()];
        let bits = self.compress_into(x, &mut values, rng)?;
        Ok(Compressed { values, bits })
    }

    /// Writes the compressed vector into `out` and returns its bit cost.
    pub fn compress_into<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        out: &mut [f64],
        rng: &mut R,
    ) -> Result<u64> {
        if x.len() != self.dim || out.len() != self.dim {
            return Err(Error::Dimension(format!(
                "compressor expects length {}, got input {} / output {}",
                self.dim,
                x.len(),
                out.len()
            )));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        apply_kind(&self.kind, x, out, rng);
        Ok(self.bits())
    }

    /// Compresses every row of `z`, drawing row `i`'s randomness from
    /// `row_rng(i)`.
    pub fn compress_rows<R, F>(&self, z: ArrayView2<'_, f64>, mut row_rng: F) -> Result<CompressedMessage>
    where
        R: Rng,
        F: FnMut(usize) -> R,
    {
        let mut payload = Array2::zeros(z.raw_dim());
        let mut bits = 0;
        let mut scratch_in = vec![0.0; self.dim];
        let mut scratch_out = vec![0.0; self.dim];
        for (i, row) in z.outer_iter().enumerate() {
            let input = match row.as_slice() {
                Some(s) => s,
                None => {
                    scratch_in.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
                    &scratch_in
                }
            };
            let mut rng = row_rng(i);
            bits += self.compress_into(input, &mut scratch_out, &mut rng)?;
            payload
                .row_mut(i)
                .iter_mut()
                .zip(&scratch_out)
                .for_each(|(d, s)| *d = *s);
        }
        Ok(CompressedMessage { payload, bits })
    }
}

fn kind_bits(kind: &CompressorKind, p: usize) -> u64 {
    let p64 = p as u64;
    match kind {
        CompressorKind::Identity => 32 * p64,
        CompressorKind::Quantize { bits, .. } => 32 + p64 * (u64::from(*bits) + 1),
        CompressorKind::TopK { k } => *k as u64 * (32 + index_bits(p)),
        CompressorKind::RandomK { k } => *k as u64 * 32 + 32,
        CompressorKind::NormSign { .. } => 32 + p64,
        CompressorKind::QuantizeSparsify { bits, k, .. } => {
            32 + *k as u64 * (u64::from(*bits) + 1 + index_bits(p))
        }
        CompressorKind::Rescaled { inner, .. } => kind_bits(inner, p),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(x) * ||x|| * 2^-(b-1) * floor(2^(b-1) |x| / ||x|| + u)`, with the
/// norm taken over `x` itself. Draws one uniform per entry, always.
fn quantize<R: Rng + ?Sized>(bits: u32, norm: NormIndex, x: &[f64], out: &mut [f64], rng: &mut R) {
    let scale = norm.norm(x);
    let levels = f64::from(1u32 << (bits - 1));
    for (o, &v) in out.iter_mut().zip(x) {
        let u: f64 = rng.random();
        *o = if scale > 0.0 {
            sign(v) * scale / levels * (levels * v.abs() / scale + u).floor()
        } else {
            0.0
        };
    }
}

/// Indices of the `k` largest magnitudes; ties go to the lower index.
fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if k < x.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b))
        });
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn apply_kind<R: Rng + ?Sized>(kind: &CompressorKind, x: &[f64], out: &mut [f64], rng: &mut R) {
    match kind {
        CompressorKind::Identity => out.copy_from_slice(x),
        CompressorKind::Quantize { bits, norm } => quantize(*bits, *norm, x, out, rng),
        CompressorKind::TopK { k } => {
            out.fill(0.0);
            for i in top_k_indices(x, *k) {
                out[i] = x[i];
            }
        }
        CompressorKind::RandomK { k } => {
            out.fill(0.0);
            for i in rand::seq::index::sample(rng, x.len(), *k) {
                out[i] = x[i];
            }
        }
        CompressorKind::NormSign { norm } => {
            let scale = norm.norm(x);
            for (o, &v) in out.iter_mut().zip(x) {
                *o = scale * sign(v);
            }
        }
        CompressorKind::QuantizeSparsify { bits, norm, k } => {
            out.fill(0.0);
            let kept = top_k_indices(x, *k);
            let sub: Vec<f64> = kept.iter().map(|&i| x[i]).collect();
            let mut q = vec![0.0; sub.len()];
            quantize(*bits, *norm, &sub, &mut q, rng);
            for (&i, v) in kept.iter().zip(q) {
                out[i] = v;
            }
        }
        CompressorKind::Rescaled { inner, r } => {
            apply_kind(inner, x, out, rng);
            out.iter_mut().for_each(|v| *v /= r);
        }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorKind::Identity => f.write_str("identity"),
            CompressorKind::Quantize { bits, norm } => write!(f, "quant:b={bits},q={norm}"),
            CompressorKind::TopK { k } => write!(f, "topk:{k}"),
            CompressorKind::RandomK { k } => write!(f, "randk:{k}"),
            CompressorKind::NormSign { norm } => write!(f, "norm-sign:q={norm}"),
            CompressorKind::QuantizeSparsify { bits, norm, k } => {
                write!(f, "qt:b={bits},q={norm},k={k}")
            }
            CompressorKind::Rescaled { inner, r } => match inner.as_ref() {
                CompressorKind::QuantizeSparsify { bits, norm, k } => {
                    write!(f, "qt-rescaled:b={bits},q={norm},k={k},r={r}")
                }
                other => write!(f, "rescaled:r={r}:{other}"),
            },
        }
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}
