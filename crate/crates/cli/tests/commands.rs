use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use superadj::report::RunReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_superadj"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const STIFF: &str = r#"
[problem]
name = "van-der-pol"
target = [0.0, 0.0]
params = { mu = 1000.0 }
[grid]
T = 2.0
n_steps = 10
[control_set]
kind = "box"
lower = [-1.0]
upper = [1.0]
[initial]
x0 = [3.0, 0.0]
"#;

#[test]
fn missing_config_is_a_config_error() {
    let o = run(&["solve", "/nonexistent/none.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/none.cfg"));
}

#[test]
fn malformed_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, STIFF.replace("\"box\"", "\"ball\"")).unwrap();
    let o = run(&["solve", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ball"));
    let unknown = dir.path().join("unknown.cfg");
    std::fs::write(&unknown, STIFF.replace("van-der-pol", "lorenz")).unwrap();
    assert_eq!(run(&["check", s(&unknown)]).status.code(), Some(2));
}

#[test]
fn blow_up_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stiff.cfg");
    std::fs::write(&cfg, STIFF).unwrap();
    let o = run(&["solve", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn solve_writes_artifacts_and_reaches_the_origin() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", s(&scenario("double_integrator.cfg")), "--out", s(dir.path()), "--baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trace.csv", "control.csv", "trajectory.csv", "report.json", "timing.json", "trace_baseline.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report = RunReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report.final_cost <= 1e-4, "final cost {}", report.final_cost);
    assert!(report.baseline.is_some());
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,cost,predicted,realized,residual,integrations_used\n"));
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,x_1,x_2\n"));
    assert_eq!(traj.lines().count(), 402);
}

#[test]
fn solve_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["solve", s(&scenario("bilinear.cfg")), "--out", s(d.path()), "--baseline"]);
        assert!(o.status.success());
    }
    for f in ["trace.csv", "control.csv", "trajectory.csv", "report.json", "trace_baseline.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn n_steps_override_changes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", s(&scenario("linear_scalar.cfg")), "--out", s(dir.path()), "--n-steps", "50", "--json"]);
    assert!(o.status.success());
    let report = RunReport::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(report.grid.n_steps, 50);
    assert_eq!(std::fs::read_to_string(dir.path().join("control.csv")).unwrap().lines().count(), 51);
}

#[test]
fn mean_field_solve_writes_the_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mf-solve", s(&scenario("mf_steering.cfg")), "--out", s(dir.path()), "--particles", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ensemble = std::fs::read_to_string(dir.path().join("ensemble.csv")).unwrap();
    assert!(ensemble.starts_with("particle,x_1\n"));
    assert_eq!(ensemble.lines().count(), 21);
    let path = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(path.starts_with("t,particle,x_1\n"));
    let report = RunReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.particles, Some(20));
    assert!(report.final_cost < report.feedback.initial_cost);
}

#[test]
fn mean_field_commands_check_their_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mf-solve", s(&scenario("linear_scalar.cfg")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["solve", s(&scenario("mf_steering.cfg")), "--out", s(dir.path()), "--baseline"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["solve", s(&scenario("linear_scalar.cfg")), "--out", s(dir.path()), "--particles", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_and_is_deterministic() {
    let a = run(&["check", s(&scenario("mf_steering.cfg")), "--json"]);
    let b = run(&["check", s(&scenario("mf_steering.cfg")), "--json"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn injected_gradient_bug_fails_the_check() {
    let o = run(&["check", s(&scenario("mf_interaction.cfg")), "--inject", "grad_bug"]);
    assert_eq!(o.status.code(), Some(1));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("FAIL") && l.contains("flat gradient vs FD")));
    assert_eq!(run(&["check", s(&scenario("mf_steering.cfg")), "--inject", "nope"]).status.code(), Some(2));
}

#[test]
fn classical_gradient_bug_fails_the_check() {
    let o = run(&["check", s(&scenario("linear_scalar.cfg")), "--inject", "grad_bug", "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let grad = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "cost gradient vs FD").unwrap();
    assert_eq!(grad["passed"], false);
}

#[test]
fn bench_compares_both_methods() {
    let o = run(&["bench", s(&scenario("linear_scalar.cfg")), "--json"]);
    assert!(o.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let count = |m: &str| rows.iter().find(|r| r["method"] == m).unwrap()["integrations"].as_f64().unwrap();
    assert!(count("feedback") > 0.0);
    assert!(count("baseline") >= count("feedback"));
}

#[test]
fn bench_table_and_empty_glob() {
    let pattern = scenario("bilinear.cfg");
    let o = run(&["bench", s(&pattern)]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);
    let o = run(&["bench", "/nonexistent/*.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_renders_a_saved_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["solve", s(&scenario("linear_scalar.cfg")), "--out", s(dir.path())]).status.success());
    let path = dir.path().join("report.json");
    let o = run(&["report", s(&path)]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("feedback"));
    let o = run(&["report", s(&path), "--json"]);
    assert_eq!(o.stdout, std::fs::read(&path).unwrap());
    assert_eq!(run(&["report", "/nonexistent/report.json"]).status.code(), Some(2));
}
