//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_theta-ring"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

const SQUARE: &str = "[[[0, 1], [0, 0]], [[0, 0], [0, 1]]]";
const DEFAULT: &str = "[[[0, 1], [0, 0.3]], [[0, 0.3], [0, 1.2]]]";

#[test]
fn theta_eval_matches_frozen_value() {
    let dir = tempfile::tempdir().unwrap();
    let om = write(dir.path(), "omega.json", SQUARE);
    let out = run(&["theta-eval", "--z", "0,0,0,0", "--omega-file", &om]);
    assert!(out.status.success());
    let v = stdout_json(&out)["value"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_f64().unwrap())
        .collect::<Vec<_>>();
    assert!((v[0] - 1.180_340_599_016_096_2).abs() < 1e-15);
    assert!(v[1].abs() < 1e-15);
}

#[test]
fn theta_eval_with_characteristic_and_derivative() {
    let dir = tempfile::tempdir().unwrap();
    let om = write(dir.path(), "omega.json", DEFAULT);
    let out = run(&[
        "theta-eval",
        "--z",
        "0.1,0.2,-0.3,0.05",
        "--omega-file",
        &om,
        "--char",
        "1/3,2/3,1/4,0",
        "--deriv",
        "2,1",
    ]);
    assert!(out.status.success());
    let v = stdout_json(&out)["value"].clone();
    assert!((v[0].as_f64().unwrap() + 1.850_820_823_497_935).abs() < 1e-12);
    assert!((v[1].as_f64().unwrap() - 19.860_535_073_081_884).abs() < 1e-12);
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.json",
        "[[[0, -1], [0, 0]], [[0, 0], [0, 1]]]",
    );
    let out = run(&["theta-eval", "--z", "0,0,0,0", "--omega-file", &bad]);
    assert_eq!(out.status.code(), Some(2));
    let om = write(dir.path(), "omega.json", SQUARE);
    let out = run(&["theta-eval", "--z", "0,0,0", "--omega-file", &om]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "theta-eval",
        "--z",
        "0,0,0,0",
        "--omega-file",
        &om,
        "--deriv",
        "9,9",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write(dir.path(), "cfg.json", r#"{"unknown_key": 1}"#);
    assert_eq!(run(&["verify", "--config", &cfg]).status.code(), Some(2));
    let out = run(&[
        "verify",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn points_are_common_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let om = write(dir.path(), "omega.json", DEFAULT);
    let out = run(&[
        "points",
        "--omega-file",
        &om,
        "--c-prime",
        "0.31,-0.05,0.12,0.27",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    let pts = v["points"].as_array().unwrap();
    assert_eq!(pts.len(), 2);
    for p in pts {
        assert!(p["residual"].as_f64().unwrap() < 1e-11);
    }
}

#[test]
fn build_emit_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let ring = dir.path().join("ring.json");
    let cfg = write(dir.path(), "cfg.json", r#"{"seed": 20240601}"#);
    let out = run(&["build", "--config", &cfg, "--out", ring.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run(&["emit", "--ring", ring.to_str().unwrap(), "--grid", "2"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    let pts = v["points"].as_array().unwrap();
    assert_eq!(pts.len(), 4);
    let l1 = pts[0]["operators"]["L1"].as_array().unwrap();
    assert_eq!(l1.len(), 2);
    assert_eq!(l1[0]["value"][0].as_f64(), Some(1.0));

    let report = dir.path().join("report.json");
    let out = run(&[
        "verify",
        "--config",
        &cfg,
        "--only",
        "eigen_relations",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["identities"][0]["name"], "eigen_relations");
    assert_eq!(r["all_pass"], true);

    let strict = write(
        dir.path(),
        "strict.json",
        r#"{"seed": 20240601, "tolerance": 0}"#,
    );
    let out = run(&["verify", "--config", &strict, "--only", "eigen_relations"]);
    assert_eq!(out.status.code(), Some(1));
}
