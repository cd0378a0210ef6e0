use std::path::Path;
use std::process::{Command, Output};

fn stochcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochcbf"))
        .args(args)
        .env("STOCHCBF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_scenarios_names_every_preset() {
    let o = stochcbf(&["list-scenarios"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for id in ["affine_1d", "pendulum_linear", "pendulum_poly", "pendulum_expquad", "integrator_hyperbola", "integrator_multi"] {
        assert!(text.contains(id), "{id} missing");
    }
}

#[test]
fn bounds_csv_covers_all_presets() {
    let o = stochcbf(&["bounds", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scenario,family,horizon,raw,bound,per_barrier_terms"));
    assert_eq!(lines.count(), 6);
    assert!(text.contains("integrator_multi,boole,300,"));
}

#[test]
fn exported_scenario_gives_the_same_bound() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("hyper.json");
    let o = stochcbf(&["export", "--preset", "integrator_hyperbola", "--out", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let from_file: serde_json::Value =
        serde_json::from_slice(&stochcbf(&["bounds", "--scenario", file.to_str().unwrap()]).stdout).unwrap();
    let from_preset: serde_json::Value =
        serde_json::from_slice(&stochcbf(&["bounds", "--preset", "integrator_hyperbola"]).stdout).unwrap();
    assert_eq!(from_file, from_preset);
    let raw = from_file["integrator_hyperbola"]["raw"].as_f64().unwrap();
    assert!((0.0299..=0.0301).contains(&raw));
}

#[test]
fn horizon_override_changes_the_bound() {
    let o = stochcbf(&["bounds", "--preset", "pendulum_expquad", "--horizon", "10"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let raw = v["pendulum_expquad"]["raw"].as_f64().unwrap();
    assert!((raw - ((-10f64).exp() + 1e-4)).abs() < 1e-15);
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn run_writes_summary_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = stochcbf(&["run", "--preset", "affine_1d", "--trials", "4", "--seed", "9", "--max-trajectories", "2", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&read(dir.path(), "summary.json")).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["empirical"]["n_trials"], 4);
    assert_eq!(summary["base_seed"], 9);
    let csv = read(dir.path(), "trajectories.csv");
    assert!(csv.starts_with("trial,k,x1,u1,residual,exited\n"));
    // Two trajectories of 151 states each.
    assert_eq!(csv.lines().count(), 1 + 2 * 151);
}

#[test]
fn strict_flags_tainted_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["run", "--preset", "pendulum_poly", "--trials", "2", "--horizon", "20", "--fallback", "max-residual", "--out", out];
    let relaxed = stochcbf(&args);
    assert_eq!(relaxed.status.code(), Some(0));
    assert!(stdout(&relaxed).contains("tainted trials are not covered"));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(stochcbf(&strict).status.code(), Some(3));
}

#[test]
fn infeasible_step_aborts_trial_under_default_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = stochcbf(&["run", "--preset", "pendulum_poly", "--trials", "2", "--horizon", "20", "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("aborted"));
}

#[test]
fn grid_one_dimensional_csv() {
    let o = stochcbf(&["grid", "--preset", "affine_1d", "--axis", "-1,3,5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,bound");
    assert_eq!(lines.len(), 6);
    // Outside the safe set the cell is empty.
    assert_eq!(lines[1], "-1,");
}

#[test]
fn grid_rejects_bad_axis() {
    let o = stochcbf(&["grid", "--preset", "affine_1d", "--axis", "3,1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(stochcbf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stochcbf(&["bounds", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(stochcbf(&["run", "--preset", "affine_1d", "--trials", "0"]).status.code(), Some(1));
    assert_eq!(stochcbf(&["run", "--preset", "affine_1d", "--scenario", "x.json"]).status.code(), Some(1));
    assert_eq!(stochcbf(&["bounds", "--scenario", "/nonexistent/s.json"]).status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(stochcbf(&["--help"]).status.code(), Some(0));
    assert_eq!(stochcbf(&["--version"]).status.code(), Some(0));
}

#[test]
fn verify_reports_failures_with_zero_tolerance() {
    let o = stochcbf(&["verify", "--fast", "--tolerance-scale", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("[FAIL]"));
}
