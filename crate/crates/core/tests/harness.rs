use std::path::Path;

use cgt_core::cgt::{Engine, StopRule, Trace};
use cgt_core::harness::{
    bits_to_tolerance, bounds_report, cell_theory, certify_report, read_plot_file, run_cells, run_experiment,
    ExperimentConfig, Instance,
};
use cgt_core::problems::RidgeProblem;
use cgt_core::graph::Topology;

fn config(dir: &Path, body: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(body).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

const SMALL: &str = r#"
    seed = 3
    [problem]
    n = 6
    p = 10
    [topology]
    kind = "erdos_renyi"
    p_edge = 0.5
    [run]
    max_iter = 200
    report_tol = 1e-3
    [[cell]]
    label = "C-GT / Top-3"
    compressor = "topk:3"
    gamma = 0.2
    eta = 0.01
"#;

fn read_trace(path: &Path) -> Trace {
    Trace::read_csv(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn single_cell_equals_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let result = run_experiment(&cfg).unwrap();

    let instance = Instance::generate(&cfg).unwrap();
    let cell = &cfg.resolve().unwrap()[0];
    let cgt = cell.cgt_config(cfg.seed, 0, cfg.run.max_iter);
    let direct = Engine::new(&instance.problem, &instance.mixing, &cgt)
        .unwrap()
        .run(StopRule {
            max_iter: cfg.run.max_iter,
            tol: None,
        })
        .unwrap();
    let run = &result.cells[0].runs[0];
    assert_eq!(run.trace.as_ref().unwrap(), &direct.trace);
    let on_disk = std::fs::read_to_string(run.trace_path.as_ref().unwrap()).unwrap();
    assert_eq!(on_disk, direct.trace.to_csv_string());
    assert_eq!(read_trace(run.trace_path.as_ref().unwrap()).steps().len(), 200);
}

#[test]
fn every_cell_sees_the_same_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{SMALL}\n[[cell]]\nlabel = \"GT\"\nalgorithm = \"gt\"\neta = 0.01\n[[cell]]\nlabel = \"Q\"\ncompressor = \"quant:b=2,q=inf\"\nalpha_x = 0.4\nalpha_y = 0.4\n"
    );
    let cfg = config(tmp.path(), &body);
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.cells.len(), 3);
    assert_eq!(result.instance_digest, Instance::generate(&cfg).unwrap().digest());

    let problem = RidgeProblem::from_json(&std::fs::read_to_string(tmp.path().join("problem.json")).unwrap()).unwrap();
    let topology = Topology::from_json(&std::fs::read_to_string(tmp.path().join("topology.json")).unwrap()).unwrap();
    let replay = Instance::generate(&cfg).unwrap();
    assert_eq!(problem.to_json(), replay.problem.to_json());
    assert_eq!(topology, replay.topology);
    // every cell starts from the same X^0, so omega_o at k = 0 agrees
    let first: Vec<f64> = result
        .cells
        .iter()
        .map(|c| c.traces().next().unwrap().initial().omega_o)
        .collect();
    assert!(first.windows(2).all(|w| w[0] == w[1]));

    let echoed = ExperimentConfig::load(&tmp.path().join("config.resolved.toml")).unwrap();
    assert_eq!(echoed.resolve().unwrap(), cfg.resolve().unwrap());
}

#[test]
fn plot_data_round_trips_and_averages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), SMALL);
    cfg.repeats = 3;
    let result = run_experiment(&cfg).unwrap();
    let cell = &result.cells[0];
    let rows = read_plot_file(&tmp.path().join("plot").join(format!("{}.dat", cell.slug))).unwrap();
    let traces: Vec<&Trace> = cell.traces().collect();
    assert_eq!(traces.len(), 3);
    assert_eq!(rows.len(), traces[0].steps().len() + 1);
    for (k, (bits, omega)) in rows.iter().enumerate() {
        let es: Vec<_> = traces.iter().map(|t| t.iter().nth(k).unwrap()).collect();
        assert_eq!(*bits, es[0].bits_cum);
        let mean = es.iter().map(|e| e.omega_o).sum::<f64>() / 3.0;
        assert!((omega - mean).abs() <= 1e-11 * mean.abs(), "k = {k}: {omega} vs {mean}");
    }
    let gp = std::fs::read_to_string(tmp.path().join("plot.gp")).unwrap();
    assert!(gp.contains(&format!("plot/{}.dat", cell.slug)));

    // one repeat: the data file is the trace itself
    let tmp1 = tempfile::tempdir().unwrap();
    let single = run_experiment(&config(tmp1.path(), SMALL)).unwrap();
    let trace = single.cells[0].traces().next().unwrap();
    let rows = read_plot_file(&tmp1.path().join("plot").join(format!("{}.dat", cell.slug))).unwrap();
    for (e, (bits, omega)) in trace.iter().zip(&rows) {
        assert_eq!(e.bits_cum, *bits);
        assert!((e.omega_o - omega).abs() <= 1e-11 * e.omega_o.abs());
    }
}

#[test]
fn bits_to_tolerance_scan() {
    let tmp = tempfile::tempdir().unwrap();
    let result = run_experiment(&config(tmp.path(), SMALL)).unwrap();
    let trace = result.cells[0].traces().next().unwrap();
    assert_eq!(bits_to_tolerance(trace, trace.initial().omega_o), Some(0));
    assert_eq!(bits_to_tolerance(trace, 0.0), None);
    let mut prev = Some(0);
    for i in 0..40 {
        let tol = trace.initial().omega_o * 10f64.powf(-0.1 * i as f64);
        let b = bits_to_tolerance(trace, tol);
        match (prev, b) {
            (Some(p), Some(b)) => assert!(b >= p),
            (None, Some(_)) => panic!("a smaller tolerance was reached earlier"),
            _ => {}
        }
        prev = b;
    }
}

#[test]
fn unreached_tolerance_is_marked_inf() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), SMALL);
    cfg.run.report_tol = 1e-300;
    run_experiment(&cfg).unwrap();
    let summary = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "label,algorithm,compressor,repeat,seed,status,iterations,final_omega_o,iterations_to_tol,bits_to_tol"
    );
    let row = lines.next().unwrap();
    assert!(row.ends_with(",inf,inf"), "{row}");
    assert!(lines.next().is_none());
}

#[test]
fn divergence_is_recorded_and_the_sweep_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\n[[cell]]\nlabel = \"GT huge step\"\nalgorithm = \"gt\"\neta = 5.0\n");
    let mut cfg = config(tmp.path(), &body);
    cfg.run.max_iter = 3000;
    let result = run_experiment(&cfg).unwrap();
    let bad = result.cell("GT huge step").unwrap();
    assert!(bad.runs[0].trace.is_none());
    assert!(bad.runs[0].error.as_deref().unwrap().contains("diverged"));
    assert!(result.cells[0].runs[0].trace.is_some());
    let summary = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("GT huge step,gt,identity,0,") && l.contains(",diverged: ")));
    assert!(!tmp.path().join("plot").join("gt-huge-step.dat").exists());
}

#[test]
fn selecting_a_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\n[[cell]]\nlabel = \"GT\"\nalgorithm = \"gt\"\neta = 0.01\n");
    let cfg = config(tmp.path(), &body);
    let result = run_cells(&cfg, Some("GT")).unwrap();
    assert_eq!(result.cells.len(), 1);
    assert_eq!(result.cells[0].label, "GT");
    assert!(run_cells(&cfg, Some("missing")).is_err());
}

#[test]
fn theory_reports_for_a_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let theory = cell_theory(&cfg, None).unwrap();
    assert_eq!(theory.constants.c, 0.7);
    let bounds = bounds_report(&theory).unwrap();
    assert!(bounds.certified);
    assert!(bounds.gamma_max > 0.0 && bounds.gamma_max <= 1.0 && bounds.eta_hat_max > 0.0);
    assert!(bounds.rho_a_minus_one <= 1e-15);
    // the hand-tuned steps are far above the closed-form bounds
    let report = certify_report(&theory).unwrap();
    assert_eq!(report.analysis.gamma, 0.2);
    assert!(!report.certificate.certified);
}
