use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
name = "cli"
seed = 2
[problem]
n = 6
p = 10
[topology]
kind = "ring"
[run]
max_iter = 150
report_tol = 1e-2
[[cell]]
label = "C-GT / Top-3"
compressor = "topk:3"
gamma = 0.2
eta = 0.01
[[cell]]
label = "GT"
algorithm = "gt"
eta = 0.01
"#;

fn cgt(args: &[&str], dir: &Path, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cgt"));
    cmd.args(args).current_dir(dir).env_remove("CGT_OUTPUT_DIR");
    if let Some(out) = env_out {
        cmd.env("CGT_OUTPUT_DIR", out);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap()
}

#[test]
fn run_writes_outputs_for_one_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("out");
    let out = cgt(
        &["run", "--config", &cfg, "--output-dir", out_dir.to_str().unwrap()],
        tmp.path(),
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["cells"].as_array().unwrap().len(), 1);
    assert_eq!(v["cells"][0]["label"], "C-GT / Top-3");
    assert_eq!(v["cells"][0]["runs"][0]["status"], "ok");
    assert_eq!(v["cells"][0]["runs"][0]["iterations"], 150);
    for f in ["summary.csv", "config.resolved.toml", "problem.json", "topology.json", "plot.gp"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    assert!(out_dir.join("traces/c-gt-top-3_seed0.csv").exists());
}

#[test]
fn output_directory_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let env_dir = tmp.path().join("from-env");
    let out = cgt(&["sweep", "--config", &cfg], tmp.path(), Some(&env_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_dir.join("traces/gt_seed0.csv").exists());
    assert!(!tmp.path().join("out").exists());
    assert_eq!(stdout_json(&out)["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn divergence_gives_a_structured_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL.replace("algorithm = \"gt\"\neta = 0.01", "algorithm = \"gt\"\neta = 5.0");
    let body = body.replace("max_iter = 150", "max_iter = 3000");
    let cfg = write_config(tmp.path(), &body);
    let out = cgt(&["sweep", "--config", &cfg, "--output-dir", "o"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "divergence");
    assert!(err["error"]["message"].as_str().unwrap().contains("GT"));
    // the summary of the whole sweep is still written and printed
    let v = stdout_json(&out);
    assert_eq!(v["cells"][0]["runs"][0]["status"], "ok");
    assert_eq!(v["cells"][1]["runs"][0]["status"], "diverged");
    assert!(tmp.path().join("o/summary.csv").exists());
}

#[test]
fn config_rejection() {
    let tmp = tempfile::tempdir().unwrap();
    for body in ["repeats = 0", "unknown_key = 1", "[[cell]]\ncompressor = \"topk:999\""] {
        let cfg = write_config(tmp.path(), body);
        let out = cgt(&["sweep", "--config", &cfg, "--output-dir", "o"], tmp.path(), None);
        assert_eq!(out.status.code(), Some(2), "{body}");
        assert_eq!(stderr_json(&out)["error"]["kind"], "config", "{body}");
    }
    let out = cgt(&["run", "--config", "missing.toml"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "io");
}

#[test]
fn bounds_prints_the_step_size_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = cgt(&["bounds", "--config", &cfg], tmp.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for key in ["gamma_max", "eta_hat_max", "m", "rho_a"] {
        assert!(v[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert_eq!(v["certified"], true);
    assert_eq!(v["constants"]["delta"].as_f64().unwrap(), 0.3);

    let gt = cgt(&["bounds", "--config", &cfg, "--cell", "GT"], tmp.path(), None);
    assert!(gt.status.success());
    assert_eq!(stdout_json(&gt)["constants"]["c"].as_f64().unwrap(), 0.0);
}

#[test]
fn certify_prints_the_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = cgt(&["certify", "--config", &cfg, "--cell", "C-GT / Top-3"], tmp.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let m = v["matrix"].as_array().unwrap();
    assert_eq!(m.len(), 5);
    assert!(m.iter().flat_map(|r| r.as_array().unwrap()).all(|x| x.as_f64().unwrap() >= 0.0));
    assert_eq!(v["certificate"]["certified"], false);
    assert!(!v["certificate"]["violated"].as_array().unwrap().is_empty());
}

#[test]
fn theory_rejects_mixed_operators() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "[problem]\nn = 4\np = 6\n[[cell]]\ncompressor = \"topk:2\"\ncompressor_y = \"topk:3\"\n";
    let cfg = write_config(tmp.path(), body);
    let out = cgt(&["bounds", "--config", &cfg], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");
}
