use std::io::{BufRead, BufReader, Read, Write};

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::CgtState;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "k,omega_o,omega_c,omega_g,omega_cx,omega_cy,bits_cum";

/// Error quantities at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorVector {
    pub k: u64,
    /// `||x_bar - x*||^2`
    pub omega_o: f64,
    /// `||X - 1 x_bar||^2`
    pub omega_c: f64,
    /// `||Y - 1 y_bar||^2`
    pub omega_g: f64,
    /// `||X - H_x||^2`
    pub omega_cx: f64,
    /// `||Y - H_y||^2`
    pub omega_cy: f64,
    pub bits_cum: u64,
}

fn consensus_error(z: ArrayView2<'_, f64>) -> f64 {
    let mean = z.mean_axis(Axis(0)).expect("at least one agent");
    z.rows()
        .into_iter()
        .map(|row| row.iter().zip(mean.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

fn sq_dist(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

impl ErrorVector {
    pub fn measure(state: &CgtState, x_star: ArrayView1<'_, f64>) -> Self {
        let x_bar = state.x.mean_axis(Axis(0)).expect("at least one agent");
        ErrorVector {
            k: state.k,
            omega_o: x_bar.iter().zip(x_star.iter()).map(|(a, b)| (a - b).powi(2)).sum(),
            omega_c: consensus_error(state.x.view()),
            omega_g: consensus_error(state.y.view()),
            omega_cx: sq_dist(state.x.view(), state.hx.view()),
            omega_cy: sq_dist(state.y.view(), state.hy.view()),
            bits_cum: state.bits_cum,
        }
    }

    /// The five quantities in order `(o, c, g, cx, cy)`.
    pub fn as_array(&self) -> [f64; 5] {
        [self.omega_o, self.omega_c, self.omega_g, self.omega_cx, self.omega_cy]
    }
}

/// Errors at the initial point and after every completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    initial: ErrorVector,
    steps: Vec<ErrorVector>,
}

impl Trace {
    pub fn new(initial: ErrorVector) -> Self {
        Trace {
            initial,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, e: ErrorVector) {
        self.steps.push(e);
    }

    pub fn initial(&self) -> &ErrorVector {
        &self.initial
    }

    pub fn steps(&self) -> &[ErrorVector] {
        &self.steps
    }

    pub fn last(&self) -> &ErrorVector {
        self.steps.last().unwrap_or(&self.initial)
    }

    /// Initial point followed by every step.
    pub fn iter(&self) -> impl Iterator<Item = &ErrorVector> {
        std::iter::once(&self.initial).chain(self.steps.iter())
    }

    /// Cumulative bits at the first iterate with `omega_o <= tol`.
    pub fn bits_to_tolerance(&self, tol: f64) -> Option<u64> {
        self.iter().find(|e| e.omega_o <= tol).map(|e| e.bits_cum)
    }

    pub fn iterations_to_tolerance(&self, tol: f64) -> Option<u64> {
        self.iter().find(|e| e.omega_o <= tol).map(|e| e.k)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for e in self.iter() {
            writeln!(
                w,
                "{},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{}",
                e.k, e.omega_o, e.omega_c, e.omega_g, e.omega_cx, e.omega_cy, e.bits_cum
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            what: format!("trace line {line}"),
            message,
        };
        let mut rows = Vec::new();
        for (idx, line) in BufReader::new(r).lines().enumerate() {
            let line = line.map_err(|e| bad(idx + 1, e.to_string()))?;
            if idx == 0 {
                if line.trim() != CSV_HEADER {
                    return Err(bad(1, format!("unexpected header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(idx + 1, format!("expected 7 fields, got {}", f.len())));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|e| bad(idx + 1, e.to_string()));
            let int = |s: &str| s.parse::<u64>().map_err(|e| bad(idx + 1, e.to_string()));
            rows.push(ErrorVector {
                k: int(f[0])?,
                omega_o: float(f[1])?,
                omega_c: float(f[2])?,
                omega_g: float(f[3])?,
                omega_cx: float(f[4])?,
                omega_cy: float(f[5])?,
                bits_cum: int(f[6])?,
            });
        }
        let mut it = rows.into_iter();
        let initial = it.next().ok_or_else(|| bad(2, "trace has no rows".into()))?;
        Ok(Trace {
            initial,
            steps: it.collect(),
        })
    }
}
