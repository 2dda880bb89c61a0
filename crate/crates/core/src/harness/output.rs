use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::SweepResult;
use crate::{Error, Result};

pub(super) fn prepare_dirs(dir: &Path) -> Result<()> {
    for sub in ["traces", "plot"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn fmt_opt(v: Option<u64>) -> String {
    v.map_or_else(|| "inf".to_string(), |b| b.to_string())
}

pub(super) fn write_summary(result: &SweepResult) -> Result<()> {
    let path = result.output_dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let tol = result.report_tol;
    let csv_err = |e: csv::Error| Error::Parse {
        what: "summary".into(),
        message: e.to_string(),
    };
    w.write_record([
        "label",
        "algorithm",
        "compressor",
        "repeat",
        "seed",
        "status",
        "iterations",
        "final_omega_o",
        "iterations_to_tol",
        "bits_to_tol",
    ])
    .map_err(csv_err)?;
    for cell in &result.cells {
        for run in &cell.runs {
            let algorithm = format!("{:?}", cell.algorithm).to_lowercase();
            let (status, iters, last, it_tol, bits_tol) = match &run.trace {
                Some(t) => (
                    "ok".to_string(),
                    t.last().k.to_string(),
                    format!("{:.11e}", t.last().omega_o),
                    fmt_opt(t.iterations_to_tolerance(tol)),
                    fmt_opt(t.bits_to_tolerance(tol)),
                ),
                None => (
                    format!("diverged: {}", run.error.as_deref().unwrap_or("unknown")),
                    String::new(),
                    String::new(),
                    "inf".into(),
                    "inf".into(),
                ),
            };
            w.write_record([
                cell.label.as_str(),
                &algorithm,
                &cell.compressor,
                &run.repeat.to_string(),
                &run.seed.to_string(),
                &status,
                &iters,
                &last,
                &it_tol,
                &bits_tol,
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
    write_atomic(&path, &bytes)
}

/// Writes `plot/<cell>.dat` (columns `bits_cum omega_o`, averaged over the
/// finished repeats) for every cell, and a gnuplot script `plot.gp` drawing
/// them on a log scale. Returns the data files written.
pub fn emit_plotdata(result: &SweepResult) -> Result<Vec<PathBuf>> {
    let plot_dir = result.output_dir.join("plot");
    std::fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
    let mut files = Vec::new();
    let mut series = Vec::new();
    for cell in &result.cells {
        let rows = cell.averaged();
        if rows.is_empty() {
            continue;
        }
        let mut text = String::from("# bits_cum omega_o\n");
        for (bits, omega) in rows {
            writeln!(text, "{bits} {omega:.11e}").expect("writing to a string");
        }
        let path = plot_dir.join(format!("{}.dat", cell.slug));
        write_atomic(&path, text.as_bytes())?;
        series.push(format!(
            "  \"plot/{}.dat\" using 1:2 with lines title \"{}\"",
            cell.slug,
            cell.label.replace('"', "'")
        ));
        files.push(path);
    }
    let mut gp = String::new();
    writeln!(gp, "set logscale y").unwrap();
    writeln!(gp, "set format y \"%.0e\"").unwrap();
    writeln!(gp, "set xlabel \"communicated bits\"").unwrap();
    writeln!(gp, "set ylabel \"||x_bar - x*||^2\"").unwrap();
    writeln!(gp, "set key top right").unwrap();
    if !series.is_empty() {
        writeln!(gp, "plot \\\n{}", series.join(", \\\n")).unwrap();
    }
    write_atomic(&result.output_dir.join("plot.gp"), gp.as_bytes())?;
    Ok(files)
}

/// Parses a file written by [`emit_plotdata`].
pub fn read_plot_file(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, m: String| Error::Parse {
        what: format!("{}:{line}", path.display()),
        message: m,
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(bad(i + 1, "expected two columns".into()));
            };
            let bits = a.parse().map_err(|e: std::num::ParseIntError| bad(i + 1, e.to_string()))?;
            let omega = b.parse().map_err(|e: std::num::ParseFloatError| bad(i + 1, e.to_string()))?;
            Ok((bits, omega))
        })
        .collect()
}
