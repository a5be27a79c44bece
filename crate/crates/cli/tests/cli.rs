use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn asymtori(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asymtori")).args(args).output().expect("binary runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn run_in(sub: &str, file: &Path, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, file.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    asymtori(&args)
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn unperturbed_reports_the_zero_torus() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("verify", &scenario("unperturbed"), tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["solve"]["zero_torus"], true);
    assert_eq!(s["certificate"]["c_u"], 0.0);
    assert_eq!(s["certificate"]["c_v"], 0.0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("u = v = 0"));
}

#[test]
fn exp_model_solves_below_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("solve", &scenario("exp-model"), tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(tmp.path());
    assert!(s["solve"]["residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(s["passed"], true);
    // solve mode runs only the solver-side checks
    let checks: Vec<&str> = s["checks"].as_array().unwrap().iter().map(|c| c["check"].as_str().unwrap()).collect();
    assert_eq!(checks, ["residual", "contraction", "decay_stability"]);
    for f in ["curves/residual_history.csv", "curves/decay.csv", "plots/residual_history.svg", "plots/decay.svg", "torus.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn counterexample_reports_divergent_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("counterexample", &scenario("counterexample"), tmp.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["counterexample"]["verdict"], "no asymptotic torus: divergent drift");
    assert!((s["counterexample"]["final_offset"].as_f64().unwrap() - 10.0).abs() < 1e-9);
    let csv = fs::read_to_string(tmp.path().join("curves/lift_offset.csv")).unwrap();
    assert!(csv.starts_with("t,offset,integrated\n"));
    assert_eq!(csv.lines().count(), 61);
    assert!(tmp.path().join("plots/lift_offset.svg").exists());
}

#[test]
fn summaries_are_bit_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        let o = run_in("verify", &scenario("exp-model"), dir, &["--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &Path| fs::read(d.join("summary.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(summary(a.path())["seed"], 7);
}

#[test]
fn json_flag_prints_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("check-decay", &scenario("polynomial"), tmp.path(), &["--json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout, fs::read(tmp.path().join("summary.json")).unwrap());
    let s: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["decay"]["holds"], true);
    assert!(s["solve"].is_null());
}

#[test]
fn check_decay_accepts_a_non_integrable_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("check-decay", &scenario("counterexample"), tmp.path(), &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(summary(tmp.path())["decay"]["integrable"], false);
}

#[test]
fn report_rerenders_plots_and_keeps_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in("verify", &scenario("drift-field"), tmp.path(), &[])), 0);
    let plot = tmp.path().join("plots/residual_history.svg");
    fs::remove_file(&plot).unwrap();
    let o = asymtori(&["report", tmp.path().to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0);
    assert!(plot.exists());
    assert_eq!(o.stdout, fs::read(tmp.path().join("summary.json")).unwrap());
}

#[test]
fn report_of_a_missing_directory_is_an_input_error() {
    let o = asymtori(&["report", "/nonexistent/run"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn schema_violations_exit_2_with_field_and_location() {
    let tmp = tempfile::tempdir().unwrap();
    let file = write_scenario(tmp.path(), "{\n  \"name\": \"bad\",\n  \"problem\": {\"kind\": \"counterexample\", \"omega\": 0.6, \"phat\": {\"kind\": \"const\", \"value\": 1}, \"horizon\": 10},\n  \"chekcs\": []\n}\n");
    let o = run_in("verify", &file, tmp.path(), &[]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("chekcs") && err.contains("line 4"), "{err}");
}

#[test]
fn non_integrable_torus_field_is_rejected_as_input() {
    let tmp = tempfile::tempdir().unwrap();
    let file = write_scenario(
        tmp.path(),
        r#"{"name": "x", "problem": {"kind": "torus_field", "omega": [0.6],
            "p": [{"form": "separable", "terms": [{"profile": {"kind": "shifted_power", "shift": 1, "power": 1}, "field": {"dim": 1, "band": 0, "coeffs": [[[0], 1, 0]]}}]}],
            "envelope": {"kind": "shifted_power", "shift": 1, "power": 1}}}"#,
    );
    let o = run_in("solve", &file, tmp.path(), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: check-decay stage:"));
}

#[test]
fn counterexample_subcommand_needs_a_counterexample() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in("counterexample", &scenario("drift-field"), tmp.path(), &[])), 2);
}

#[test]
fn failed_threshold_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("drift-field")).unwrap().replace("\"max\": 1e-08", "\"max\": 1e-30");
    assert!(text.contains("1e-30"));
    let file = write_scenario(tmp.path(), &text);
    let o = run_in("solve", &file, tmp.path(), &[]);
    assert_eq!(code(&o), 1);
    assert_eq!(summary(tmp.path())["passed"], false);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL residual"));
}

#[test]
fn solver_breakdown_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s: Value = serde_json::from_str(&fs::read_to_string(scenario("exp-model")).unwrap()).unwrap();
    s["solver"] = serde_json::json!({"max_iter": 1, "upsilon_prime": 2.0, "max_escalations": 0});
    let file = write_scenario(tmp.path(), &s.to_string());
    let o = run_in("solve", &file, tmp.path(), &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: solve stage:"));
}

#[test]
fn flags_override_the_solver_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("solve", &scenario("drift-field"), tmp.path(), &["--nodes", "120", "--band", "8", "--tol", "1e-9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let torus: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("torus.json")).unwrap()).unwrap();
    // `nodes` counts intervals
    assert_eq!(torus["u"]["nodes"].as_array().unwrap().len(), 121);
    assert_eq!(torus["u"]["band"], 8);
}
