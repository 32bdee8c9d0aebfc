use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simclock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simclock")).args(args).output().expect("binary runs")
}

fn error_of(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

fn run_into(dir: &Path, args: &[&str]) {
    let mut all = vec!["--out", dir.to_str().unwrap()];
    all.extend_from_slice(args);
    let out = simclock(&all);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn smoke_run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_into(&dir, &["squeeze-scan", "--set", "n_cycles=10", "--set", "n_bins=4"]);
    for f in ["records.csv", "summary.json", "budget.csv", "resolved_config.toml"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["preset"], "squeeze-scan");
    let mut rdr = csv::Reader::from_path(dir.join("records.csv")).unwrap();
    assert_eq!(rdr.records().count(), 10 * 4 + 10 * 3);
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_into(&a, &["clock-squeeze", "--seed", "7", "--set", "n_cycles=10"]);
    run_into(&b, &["clock-squeeze", "--seed", "7", "--workers", "4", "--set", "n_cycles=10"]);
    for f in ["records.csv", "summary.json", "budget.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_into(&a, &["clock-squeeze", "--seed", "3", "--set", "n_cycles=10", "--set", "gap=\"12 us\""]);
    let cfg = a.join("resolved_config.toml");
    run_into(&b, &["clock-squeeze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("records.csv")).unwrap(), fs::read(b.join("records.csv")).unwrap());
    assert_eq!(fs::read(&cfg).unwrap(), fs::read(b.join("resolved_config.toml")).unwrap());
}

#[test]
fn misspelled_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("x");
    let out = simclock(&["squeeze-scan", "--out", dir.to_str().unwrap(), "--set", "n_cycels=10"]);
    let e = error_of(&out);
    assert_eq!(e["error"], "unknown_key");
    assert!(e["message"].as_str().unwrap().contains("n_cycels"));
    assert!(!dir.exists());
}

#[test]
fn missing_unit_is_rejected() {
    let out = simclock(&["clock-squeeze", "--set", "gap=10"]);
    let e = error_of(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("unit"));
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let args = ["oracle-check", "--set", "oracle_atoms=[20]"];
    run_into(&dir, &args);
    let mut again = vec!["--out", dir.to_str().unwrap()];
    again.extend_from_slice(&args);
    let e = error_of(&simclock(&again));
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("--force"));
    again.push("--force");
    assert!(simclock(&again).status.success());
}

#[test]
fn oracle_check_reports_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    run_into(&dir, &["oracle-check", "--set", "oracle_atoms=[50, 100]", "--set", "oracle_kappa_sq=[1.6]"]);
    let csv = fs::read_to_string(dir.join("records.csv")).unwrap();
    assert!(csv.starts_with("n_atoms,kappa_sq,exact,gaussian,rel_err,pass\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(!dir.join("budget.csv").exists());
}

#[test]
fn unknown_preset_fails() {
    let out = simclock(&["squeeze"]);
    assert!(!out.status.success());
}
