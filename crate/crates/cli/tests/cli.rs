use std::path::Path;
use std::process::{Command, Output};

fn designvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_designvar")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn small_study(dir: &Path) -> String {
    let path = dir.join("study.json");
    let cfg = r#"{
        "data": {"synthetic": {"seed": 3, "control_sizes": [4, 3, 5], "treatment_sizes": [3, 4, 2]}},
        "estimators": ["GS", "OC1", "OC2", "GC", "CR2"],
        "covariates": ["radio"],
        "impute": ["age"],
        "scale": [1.0, 4.0],
        "seed": 5
    }"#;
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(designvar(&["check", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(designvar(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn computation_errors_are_json_on_stderr() {
    let o = designvar(&["probs"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "Config");
    let o = designvar(&["--builtin", "nope", "bound"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_on_two_pair_toy() {
    let o = designvar(&["check", "--builtin", "two-pair", "--format", "json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["all_passed"], true);
    for row in report["rows"].as_array().unwrap() {
        assert!(row["lambda_max"].as_f64().unwrap() <= 1.0 + 1e-8);
        assert!(row["second_term_max"].as_f64().unwrap() <= 1e-10);
    }
}

#[test]
fn design_and_probability_commands() {
    let o = designvar(&["design", "enumerate", "--builtin", "toy-cr4", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["count"], 6);
    let a = stdout(&designvar(&["design", "sample", "--builtin", "toy-cr4", "--seed", "9", "--format", "csv"]));
    assert_eq!(a, stdout(&designvar(&["design", "sample", "--builtin", "toy-cr4", "--seed", "9", "--format", "csv"])));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probs.json");
    let o = designvar(&["probs", "--builtin", "toy-cr4", "--format", "json", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["d"][0][4].as_f64().unwrap(), -1.0);

    let v: serde_json::Value =
        serde_json::from_slice(&designvar(&["bound", "--builtin", "toy-cr4", "--format", "json"]).stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["d_tilde"][0][0].as_f64().unwrap(), 2.0);
}

#[test]
fn varest_reports_every_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("varest.json");
    std::fs::write(
        &path,
        r#"{"builtin": "two-pair", "assignment": [1, 1, 2, 1, 2, 2], "outcomes": [0.3, -0.1, 0.8, 1.2, -0.4, 0.5]}"#,
    )
    .unwrap();
    let cache = dir.path().join("cache");
    let args = [
        "varest",
        "--config",
        path.to_str().unwrap(),
        "--format",
        "json",
        "--tensor-cache",
        cache.to_str().unwrap(),
    ];
    let first = designvar(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let v: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let names: Vec<&str> = v["estimates"].as_array().unwrap().iter().map(|e| e["estimator"].as_str().unwrap()).collect();
    assert_eq!(names, ["GS", "OC0", "OC1", "OC2", "GC", "HC0", "HC1", "HC2", "CR0", "CR1", "CR2"]);
    assert!(std::fs::read_dir(&cache).unwrap().count() > 0);
    // a warm cache gives the same bytes
    assert_eq!(first.stdout, designvar(&args).stdout);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_study(dir.path());
    let a = designvar(&["simulate", "--config", &cfg, "--format", "csv"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = designvar(&["simulate", "--config", &cfg, "--format", "csv"]);
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.starts_with("block,estimator,E,SE,Bias,rMSE,CV"));
    let gs = text.lines().find(|l| l.starts_with("full,GS,")).unwrap();
    assert_eq!(gs.split(',').nth(9).unwrap(), "8");
    assert!(text.lines().any(|l| l.starts_with("full,OC2,")));

    let table = stdout(&designvar(&["simulate", "--config", &cfg]));
    assert!(table.contains("[full] n = 21, assignments = 8"));
}
