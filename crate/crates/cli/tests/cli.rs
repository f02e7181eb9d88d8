use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const ONE_MASS: &str = r#"{"ell": 1.0, "masses": [{"a": 0.5, "M": 1.0}]}"#;
const TARGETS: &str = r#"{
  "displacement": {"bumps": [{"center": 0.2, "half_width": 0.12}]},
  "velocity": {"bumps": [{"center": 0.8, "half_width": 0.12, "amplitude": 0.5}]}
}"#;

fn run(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_beadstring"));
    cmd.current_dir(dir).args(args);
    if let Some(t) = threads {
        cmd.env("BEADSTRING_THREADS", t);
    }
    cmd.output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one_mass.json"), ONE_MASS).unwrap();
    fs::write(dir.path().join("targets.json"), TARGETS).unwrap();
    dir
}

#[test]
fn spectrum_lists_the_even_family_and_hashes_artifacts() {
    let dir = workspace();
    let out = run(dir.path(), &["spectrum", "--config", "one_mass.json", "--count", "10", "--out", "s"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s/spectrum.csv")).unwrap();
    let lambdas: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lambdas.len(), 10);
    assert!(lambdas.iter().any(|l| (l - 2.0 * std::f64::consts::PI).abs() < 1e-9));
    let manifest = json(&dir.path().join("s/manifest.json"));
    for a in manifest["artifacts"].as_array().unwrap() {
        let bytes = fs::read(dir.path().join("s").join(a["file"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(a["sha256"].as_str().unwrap(), hex);
    }
}

#[test]
fn synthesize_end_to_end() {
    let dir = workspace();
    let args = ["synthesize", "--config", "one_mass.json", "--T", "2.2", "--P", "20", "--target", "targets.json"];
    let out = run(dir.path(), &args, None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("out/verification.json"));
    assert!(v["relative_error"].as_f64().unwrap() < 0.1);
    assert!(v["w0_error"].as_f64().is_some() && v["wm1_error"].as_f64().is_some());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = workspace();
    let base = ["synthesize", "--config", "one_mass.json", "--T", "2.2", "--P", "10", "--target", "targets.json"];
    let one = [&base[..], &["--out", "one"]].concat();
    let four = [&base[..], &["--out", "four"]].concat();
    assert!(run(dir.path(), &one, Some("1")).status.success());
    assert!(run(dir.path(), &four, Some("4")).status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("control.csv")).unwrap();
    assert_eq!(read("one"), read("four"));
}

#[test]
fn zero_state_verifies_with_zero_norms() {
    let dir = workspace();
    let mut csv = String::from("segment,x,displacement,velocity\n");
    for j in 0..2 {
        for i in 0..=50 {
            csv.push_str(&format!("{j},{},0,0\n", 0.5 * j as f64 + 0.01 * i as f64));
        }
    }
    fs::write(dir.path().join("zero.csv"), csv).unwrap();
    let out = run(dir.path(), &["verify", "--config", "one_mass.json", "--state", "zero.csv"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("out/verify.json"));
    assert_eq!(v["passed"], Value::Bool(true));
    assert_eq!(v["displacement"]["w0_norm"].as_f64(), Some(0.0));
    assert_eq!(v["velocity"]["wm1_norm"].as_f64(), Some(0.0));
}

#[test]
fn short_horizon_exits_with_precondition_code() {
    let dir = workspace();
    let args = ["synthesize", "--config", "one_mass.json", "--T", "1.9", "--target", "targets.json"];
    let out = run(dir.path(), &args, None);
    assert_eq!(out.status.code(), Some(2));
    let err = json(&dir.path().join("out/error.json"));
    assert!(err.is_object());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), r#"{"ell": 1, "masses": [], "extra": 1}"#).unwrap();
    assert_eq!(run(dir.path(), &["spectrum", "--config", "bad.json"], None).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["spectrum", "--config", "one_mass.json", "--bogus"], None).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["spectrum", "--config", "missing.json"], None).status.code(), Some(1));
}
