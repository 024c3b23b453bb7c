use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ricci-lab")).arg("--out").arg(dir).args(args).output().expect("binary runs")
}

fn report(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

#[test]
fn s1_cross_term_example_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-cross-term", "--cone", "S1", "--n", "5", "--samples", "10000", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "verify-cross-term");
    assert!(r["report"]["lambda_empirical"].as_f64().unwrap() <= 1e-8);
    assert_eq!(r["pass"], Value::Bool(true));
    assert_eq!(r["seed"], 7);
    assert_eq!(r["config"]["cone"], "S1");
    assert!(r["build"].as_str().unwrap().starts_with("ricci-lab"));
    assert!(r["tolerances"].is_object());
    assert!(dir.path().join("verify-cross-term.csv").exists());
}

#[test]
fn sphere_ode_tracks_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["ode-run", "--sphere", "--n", "3", "--c0", "1", "--T", "0.2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "ode-run");
    assert!(r["report"]["oracle_error"].as_f64().unwrap() <= 1e-6, "{}", r["report"]);
    let jsonl = fs::read_to_string(dir.path().join("ode-run.jsonl")).unwrap();
    assert!(jsonl.lines().count() > 10);
}

#[test]
fn unknown_flag_is_a_usage_error_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["ode-run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invalid_config_is_a_usage_error_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-cross-term", "--cone", "S3", "--n", "3", "--samples", "10"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn failed_assertion_exits_one_and_names_the_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-cross-term", "--cone", "S1", "--n", "4", "--samples", "20", "--lambda", "-1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let cert = dir.path().join("verify-cross-term-certificates.json");
    assert!(err.contains(&format!("certificate: {}", cert.display())), "{err}");
    assert!(cert.exists());
}

#[test]
fn reports_are_byte_identical_on_rerun() {
    let cases: &[&[&str]] = &[
        &["estimate-lambda", "--cone", "S2", "--n", "5", "--samples", "300", "--seed", "3"],
        &["kaehler-verify", "--m", "2", "--samples", "50", "--seed", "3"],
        &["pic1-family", "--runs", "2", "--seed", "3", "--steps", "4"],
        &["heat-run", "--j", "40", "--refine", "2", "--T", "0.01"],
    ];
    for args in cases {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        // A coarse heat grid may miss its oracle tolerance; only sameness matters.
        let first = run(a.path(), args).status.code();
        assert!(matches!(first, Some(0 | 1)), "{args:?}");
        assert_eq!(run(b.path(), args).status.code(), first, "{args:?}");
        let name = args[0];
        for suffix in ["json", "csv"] {
            let x = fs::read(a.path().join(format!("{name}.{suffix}"))).unwrap();
            let y = fs::read(b.path().join(format!("{name}.{suffix}"))).unwrap();
            assert!(x == y, "{name}.{suffix} differs between runs");
        }
    }
}
