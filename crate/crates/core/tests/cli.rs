//! Black-box checks of the command-line binary: output format, determinism,
//! cache behavior, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bosecount::output::read_csv;

const BIN: &str = env!("CARGO_BIN_EXE_bosecount");

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const HOMODYNE_FOCK11: &str = r#"{
    "sources": [
        {"family": "fock", "n": 1},
        {"family": "fock", "n": 1}
    ],
    "detectors": [
        {"r_aa": 0.5, "r_bb": 0.5, "r_ab_modulus": 0.5, "theta": 0.0},
        {"r_aa": 0.5, "r_bb": 0.5, "r_ab_modulus": 0.5, "theta": 3.141592653589793}
    ]
}"#;

const POISSON_PAIR: &str = r#"{
    "sources": [
        {"family": "poisson", "mean": 3.0},
        {"family": "poisson", "mean": 2.0}
    ],
    "detectors": [
        {"r_aa": 0.36, "r_bb": 0.24, "r_ab_modulus": 0.2939387691339814, "theta": 0.0},
        {"r_aa": 0.24, "r_bb": 0.36, "r_ab_modulus": 0.2939387691339814, "theta": 2.9845130209103035}
    ],
    "backend": "network",
    "conditioning": {"detector_index": 1, "count": 3}
}"#;

fn joint_value(table: &bosecount::output::CsvTable, n1: u32, n2: u32) -> f64 {
    table
        .rows
        .iter()
        .find(|r| r[0] == n1.to_string() && r[1] == n2.to_string())
        .map(|r| r[2].parse::<f64>().unwrap())
        .unwrap_or(0.0)
}

#[test]
fn coincidences_vanish_for_single_quanta_on_a_balanced_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", HOMODYNE_FOCK11);
    run_ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "joint",
    ]);
    let table = read_csv(&dir.path().join("joint.csv")).unwrap();
    assert!((joint_value(&table, 2, 0) - 0.5).abs() <= 1e-12);
    assert!((joint_value(&table, 0, 2) - 0.5).abs() <= 1e-12);
    assert!(joint_value(&table, 1, 1) <= 1e-12);
}

#[test]
fn repeated_runs_are_identical_up_to_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", POISSON_PAIR);
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        fs::create_dir(&out).unwrap();
        run_ok(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            if sub == "a" { "1" } else { "2" },
            "conditional",
        ]);
    }
    for name in ["conditional.csv", "peaks.csv"] {
        let strip = |sub: &str| -> String {
            fs::read_to_string(dir.path().join(sub).join(name))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("# timestamp:"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip("a"), strip("b"), "{name} differs between runs");
    }
}

#[test]
fn written_floats_survive_a_read_write_cycle_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", HOMODYNE_FOCK11);
    run_ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "joint",
    ]);
    let table = read_csv(&dir.path().join("joint.csv")).unwrap();
    for row in &table.rows {
        let text = &row[2];
        let value: f64 = text.parse().unwrap();
        assert_eq!(
            text,
            &bosecount::output::fmt_f64(value),
            "formatting is not a fixed point of parse"
        );
    }
}

#[test]
fn kernel_cache_gives_identical_results_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = write_config(dir.path(), "cfg.json", POISSON_PAIR);
    let mut outputs = Vec::new();
    for sub in ["cold", "warm"] {
        let out = dir.path().join(sub);
        fs::create_dir(&out).unwrap();
        run_ok(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--cache",
            cache.to_str().unwrap(),
            "joint",
        ]);
        outputs.push(
            fs::read_to_string(out.join("joint.csv"))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("# timestamp:"))
                .collect::<Vec<_>>()
                .join("\n"),
        );
    }
    assert_eq!(outputs[0], outputs[1], "warm cache changed the table");
    assert!(
        fs::read_dir(&cache).unwrap().count() > 0,
        "cache directory stayed empty"
    );
    run_ok(&["--cache", cache.to_str().unwrap(), "cache", "stat"]);
    run_ok(&["--cache", cache.to_str().unwrap(), "cache", "clear"]);
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 0);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"sources": []}"#);
    let out = run(&["--config", cfg.to_str().unwrap(), "joint"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["--config", "/nonexistent/cfg.json", "joint"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unphysical_detector_layouts_exit_with_code_3() {
    // combined flux exceeds the available field: two balanced pairs
    let body = r#"{
        "sources": [
            {"family": "fock", "n": 1},
            {"family": "fock", "n": 1}
        ],
        "detectors": [
            {"r_aa": 0.8, "r_bb": 0.8, "r_ab_modulus": 0.8, "theta": 0.0},
            {"r_aa": 0.8, "r_bb": 0.8, "r_ab_modulus": 0.8, "theta": 3.141592653589793}
        ]
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", body);
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "joint",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exhausted_work_budget_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", POISSON_PAIR);
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--budget",
        "1",
        "joint",
    ]);
    assert_eq!(out.status.code(), Some(4));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("budget"), "stderr should explain the budget: {msg}");
}
