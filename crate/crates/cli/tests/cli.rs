//! End-to-end tests of the `insens` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_insens"));
    c.env_remove("INSENS_OUT_DIR");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn zero_config_text() -> String {
    std::fs::read_to_string(config("zero.toml")).unwrap()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn zero_source_gives_zero_control_and_zero_h0() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synthesize",
        "-c",
        path_str(&config("zero.toml")),
        "-o",
        path_str(dir.path()),
    ]);
    assert_exit(&out, 0);
    let s = read_json(&dir.path().join("summary.json"));
    assert_eq!(s["synthesis"]["v_l2"], 0.0);
    assert_eq!(s["synthesis"]["h0_norm"], 0.0);
    assert_eq!(s["synthesis"]["status"], "converged");
    let mut rdr = csv::Reader::from_path(dir.path().join("control.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[3].parse::<f64>().unwrap(), 0.0);
        rows += 1;
    }
    // 64 time cells, 33 nodes plus two surface values each.
    assert_eq!(rows, 64 * 35);
}

#[test]
fn reference_run_passes_its_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synthesize",
        "-c",
        path_str(&config("reference.toml")),
        "-o",
        path_str(dir.path()),
    ]);
    assert_exit(&out, 0);
    let s = read_json(&dir.path().join("summary.json"));
    assert_eq!(s["schema_version"], 1);
    for c in s["checks"].as_array().unwrap() {
        assert_eq!(c["passed"], true, "{c}");
    }
    for f in [
        "history.csv",
        "ladders.csv",
        "control.csv",
        "weights.csv",
        "timings.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(
        !text.contains("\"seconds\""),
        "timings leaked into summary.json"
    );
    let t = read_json(&dir.path().join("timings.json"));
    assert!(t["seconds"]["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn disjoint_regions_exit_2_citing_a3() {
    let dir = tempfile::tempdir().unwrap();
    let text = zero_config_text()
        .replace("omega = [0.2, 0.8]", "omega = [0.6, 0.8]")
        .replace("observation = [0.1, 0.9]", "observation = [0.1, 0.4]");
    let cfg = write_config(dir.path(), &text);
    let out = run(&[
        "synthesize",
        "-c",
        path_str(&cfg),
        "-o",
        path_str(&dir.path().join("o")),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("A3"));
}

#[test]
fn unknown_field_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = zero_config_text().replace("cells = 32", "cells = 32\nspacing = 0.1");
    let cfg = write_config(dir.path(), &text);
    let out = run(&[
        "synthesize",
        "-c",
        path_str(&cfg),
        "-o",
        path_str(&dir.path().join("o")),
    ]);
    assert_exit(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("spacing") && err.contains("line"), "{err}");
}

#[test]
fn nonzero_initial_datum_exit_2_citing_a4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("initial_amplitude = 0.2\n{}", zero_config_text()),
    );
    let out = run(&[
        "synthesize",
        "-c",
        path_str(&cfg),
        "-o",
        path_str(&dir.path().join("o")),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("A4"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(&[
            "synthesize",
            "-c",
            path_str(&config("reference.toml")),
            "-o",
            path_str(d.path()),
        ]);
        assert_exit(&out, 0);
    }
    for f in [
        "summary.json",
        "history.csv",
        "ladders.csv",
        "control.csv",
        "weights.csv",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
}

#[test]
fn seed_override_changes_hash_and_control() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("reference.toml");
    assert_exit(
        &run(&["synthesize", "-c", path_str(&cfg), "-o", path_str(a.path())]),
        0,
    );
    assert_exit(
        &run(&[
            "synthesize",
            "-c",
            path_str(&cfg),
            "--seed",
            "5",
            "-o",
            path_str(b.path()),
        ]),
        0,
    );
    let sa = read_json(&a.path().join("summary.json"));
    let sb = read_json(&b.path().join("summary.json"));
    assert_ne!(sa["config_hash"], sb["config_hash"]);
    assert_eq!(sb["seed"], 5);
    assert_ne!(sa["synthesis"]["v_l2"], sb["synthesis"]["v_l2"]);
}

#[test]
fn env_selects_output_dir_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let cfg = config("zero.toml");
    let out = bin()
        .args(["synthesize", "-c", path_str(&cfg)])
        .env("INSENS_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert!(env_dir.join("summary.json").exists());
    let out = bin()
        .args([
            "synthesize",
            "-c",
            path_str(&cfg),
            "-o",
            path_str(&flag_dir),
        ])
        .env("INSENS_OUT_DIR", dir.path().join("unused"))
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert!(flag_dir.join("summary.json").exists());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn diagnose_duality_writes_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "diagnose",
        "duality",
        "-c",
        path_str(&config("reference.toml")),
        "-o",
        path_str(dir.path()),
    ]);
    assert_exit(&out, 0);
    let s = read_json(&dir.path().join("diagnose-duality.json"));
    assert_eq!(s["diagnostic"], "duality");
    assert_eq!(s["report"]["pairs"], 100);
    assert!(s["report"].get("seconds").is_none());
    assert_eq!(s["checks"][0]["passed"], true);
    assert!(dir.path().join("diagnose-duality.timings.json").exists());
}

#[test]
fn sweep_records_each_row_including_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        "--param",
        "N",
        "--values",
        "24,32,7.5",
        "-c",
        path_str(&config("reference.toml")),
        "-o",
        path_str(dir.path()),
    ]);
    assert_exit(&out, 0);
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[1][2], "converged");
    assert_eq!(&rows[2][2], "validation");
    assert_eq!(&rows[2][3], "2");
    let s = read_json(&dir.path().join("sweep.json"));
    assert_eq!(s["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn clap_rejects_unknown_subcommand_with_exit_2() {
    let out = run(&["frobnicate"]);
    assert_exit(&out, 2);
}
