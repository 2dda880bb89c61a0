//! Communication graphs and mixing matrices.
//!
//! A [`Topology`] is a connected undirected graph over agents `0..n`. The
//! [`MixingMatrix`] built from it with Metropolis-Hastings weights is
//! symmetric and doubly stochastic, and carries the spectral constants the
//! convergence analysis needs:
//!
//! - `rho_w`: spectral norm of `W - (1/n) 1 1^T`,
//! - `s = 1 - rho_w`: the spectral gap,
//! - `lambda = ||I - W||^2`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{self, label};
use crate::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;
const ER_MAX_ATTEMPTS: u32 = 1000;
/// Matrices at least this large are mixed on the rayon pool.
const PAR_MIN_ENTRIES: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Path,
    Complete,
    ErdosRenyi { p_edge: f64 },
    /// Row-major grid with `ceil(sqrt(n))` columns; the last row may be partial.
    Grid,
}

/// Connected undirected graph without self-loops. Edges are stored as
/// `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyDoc", into = "TopologyDoc")]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
}

/// On-disk shape: `{"n": 4, "edges": [[0, 1], [1, 2]]}`.
#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<TopologyDoc> for Topology {
    type Error = Error;

    fn try_from(doc: TopologyDoc) -> Result<Self> {
        Topology::new(doc.n, doc.edges.into_iter().map(|[i, j]| (i, j)))
    }
}

impl From<Topology> for TopologyDoc {
    fn from(t: Topology) -> Self {
        TopologyDoc {
            n: t.n,
            edges: t.edges.into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

impl Topology {
    /// Validates and normalizes an edge list. Rejects self-loops, out of range
    /// indices, duplicates (in either orientation) and disconnected graphs.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidTopology("graph needs at least one agent".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidTopology(format!("self-loop at agent {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a}, {b}) out of range for n = {n}"
                )));
            }
            let e = (a.min(b), a.max(b));
            if !set.insert(e) {
                return Err(Error::InvalidTopology(format!("duplicate edge {e:?}")));
            }
        }
        let topo = Topology {
            n,
            edges: set.into_iter().collect(),
        };
        if !topo.is_connected() {
            return Err(Error::InvalidTopology("graph is not connected".into()));
        }
        Ok(topo)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        adjacency(self.n, &self.edges)
    }

    fn is_connected(&self) -> bool {
        connected(self.n, &self.edges)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("topology serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "topology JSON".into(),
            message: e.to_string(),
        })
    }
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    adj
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let adj = adjacency(n, edges);
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Builds a connected topology. Deterministic in `(kind, n, seed)`; only the
/// Erdős–Rényi kind consumes randomness.
pub fn make_topology(kind: TopologyKind, n: usize, seed: u64) -> Result<Topology> {
    if n < 2 {
        return Err(Error::InvalidTopology(format!("need n >= 2, got {n}")));
    }
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Ring => {
            let mut e: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
            if n > 2 {
                e.push((0, n - 1));
            }
            e
        }
        TopologyKind::Path => (0..n - 1).map(|i| (i, i + 1)).collect(),
        TopologyKind::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        TopologyKind::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let mut e = Vec::new();
            for i in 0..n {
                if (i + 1) % cols != 0 && i + 1 < n {
                    e.push((i, i + 1));
                }
                if i + cols < n {
                    e.push((i, i + cols));
                }
            }
            e
        }
        TopologyKind::ErdosRenyi { p_edge } => {
            if !(p_edge > 0.0 && p_edge <= 1.0) {
                return Err(Error::InvalidTopology(format!(
                    "edge probability must lie in (0, 1], got {p_edge}"
                )));
            }
            return erdos_renyi(n, p_edge, seed);
        }
    };
    Topology::new(n, edges)
}

fn erdos_renyi(n: usize, p_edge: f64, seed: u64) -> Result<Topology> {
    for attempt in 0..ER_MAX_ATTEMPTS {
        let mut rng = seed::rng_from(seed, &[label::TOPOLOGY, n as u64, attempt as u64]);
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|_| rng.random::<f64>() < p_edge)
            .collect();
        if connected(n, &edges) {
            return Ok(Topology { n, edges });
        }
    }
    Err(Error::Disconnected {
        attempts: ER_MAX_ATTEMPTS,
        p_edge,
    })
}

/// Spectral constants of a symmetric doubly stochastic matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub rho_w: f64,
    pub s: f64,
    pub lambda: f64,
}

/// Computes `(rho_w, s, lambda)` by dense symmetric eigendecomposition.
pub fn spectral_quantities(w: ArrayView2<'_, f64>) -> Result<Spectrum> {
    check_doubly_stochastic(w, STOCHASTIC_TOL)?;
    let n = w.nrows();
    let inv_n = 1.0 / n as f64;
    let centered = DMatrix::from_fn(n, n, |i, j| w[[i, j]] - inv_n);
    let laplacian = DMatrix::from_fn(n, n, |i, j| f64::from(i == j) - w[[i, j]]);
    let rho_w = max_abs_eigenvalue(centered);
    let lap = max_abs_eigenvalue(laplacian);
    Ok(Spectrum {
        rho_w,
        s: 1.0 - rho_w,
        lambda: lap * lap,
    })
}

fn max_abs_eigenvalue(m: DMatrix<f64>) -> f64 {
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_doubly_stochastic(w: ArrayView2<'_, f64>, tol: f64) -> Result<()> {
    let (n, m) = w.dim();
    if n != m || n == 0 {
        return Err(Error::InvalidMixing(format!("matrix must be square, got {n}x{m}")));
    }
    for i in 0..n {
        let row: f64 = w.row(i).sum();
        let col: f64 = w.column(i).sum();
        if (row - 1.0).abs() > tol || (col - 1.0).abs() > tol {
            return Err(Error::InvalidMixing(format!(
                "row/column {i} sums to {row}/{col}, expected 1"
            )));
        }
        for j in 0..i {
            if (w[[i, j]] - w[[j, i]]).abs() > tol {
                return Err(Error::InvalidMixing(format!("asymmetric at ({i}, {j})")));
            }
        }
        if w.row(i).iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidMixing(format!("row {i} has a negative entry")));
        }
    }
    Ok(())
}

/// A symmetric doubly stochastic weight matrix plus its spectral constants.
///
/// Multiplication uses a sparse row representation, so applying `W` costs
/// `O(|E| p)` rather than `O(n^2 p)`.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: Array2<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    spectrum: Spectrum,
}

impl MixingMatrix {
    /// Wraps an explicit matrix after validating it.
    pub fn from_dense(w: Array2<f64>) -> Result<Self> {
        let spectrum = spectral_quantities(w.view())?;
        let rows = w
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Ok(MixingMatrix { w, rows, spectrum })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn dense(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    pub fn rho_w(&self) -> f64 {
        self.spectrum.rho_w
    }

    pub fn s(&self) -> f64 {
        self.spectrum.s
    }

    pub fn lambda(&self) -> f64 {
        self.spectrum.lambda
    }

    /// Returns `W x` for an `n x p` matrix `x`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        let mix_row = |(i, mut acc): (usize, ndarray::ArrayViewMut1<'_, f64>)| {
            for &(j, wij) in &self.rows[i] {
                acc.scaled_add(wij, &x.row(j));
            }
        };
        if x.len() >= PAR_MIN_ENTRIES {
            out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(mix_row);
        } else {
            out.axis_iter_mut(Axis(0)).enumerate().for_each(mix_row);
        }
        out
    }

    /// `W x` for an `x` whose row `j` is zero outside `support[j]`. Each
    /// output entry accumulates the same terms in the same order as
    /// [`MixingMatrix::apply`], so both agree exactly.
    pub fn apply_sparse(&self, x: ArrayView2<'_, f64>, support: &[Vec<usize>]) -> Array2<f64> {
        assert_eq!(support.len(), x.nrows(), "one support set per row");
        let mut out = Array2::zeros(x.raw_dim());
        for (i, mut acc) in out.axis_iter_mut(Axis(0)).enumerate() {
            for &(j, wij) in &self.rows[i] {
                let src = x.row(j);
                for &c in &support[j] {
                    acc[c] += wij * src[c];
                }
            }
        }
        out
    }
}

/// Metropolis–Hastings weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on
/// edges, with the residual mass on the diagonal.
pub fn metropolis_weights(t: &Topology) -> MixingMatrix {
    let n = t.n();
    let deg = t.degrees();
    let mut w = Array2::<f64>::zeros((n, n));
    for &(i, j) in t.edges() {
        let v = 1.0 / (1 + deg[i].max(deg[j])) as f64;
        w[[i, j]] = v;
        w[[j, i]] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[[i, j]]).sum();
        w[[i, i]] = 1.0 - off;
    }
    MixingMatrix::from_dense(w).expect("Metropolis weights are doubly stochastic")
}
