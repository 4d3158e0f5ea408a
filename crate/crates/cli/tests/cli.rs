//! End-to-end tests of the experiment runner binary: strict config parsing,
//! deterministic byte-identical outputs, exit codes, and the subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_levy-bsde"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"
output_dir = "unused"

[model]
gamma = 0.0
sigma = 1.0
horizon = 1.0

[[model.jumps]]
intensity = 1.0
sizes = [[1.0, 0.5], [-1.0, 0.5]]

[scheme]
steps = 8
paths = 500
seed = 11
basis_degree = 3
picard_tol = 1e-10
max_picard_iters = 50

[[experiment]]
name = "exact"
kind = "jump_exactness"
[experiment.params]
paths = 50
steps = 8
tolerance_rel = 1e-12

[[experiment]]
name = "triangle"
kind = "derivative_triangle"
[experiment.params]
n_r = 2
tolerance_rel = 0.1

[[experiment]]
name = "paths_out"
kind = "export_paths"
[experiment.params]
paths = 5
steps = 4
"#;

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().to_string(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn misspelled_key_is_rejected_with_the_key_named() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replace("basis_degree", "basis_degrees");
    let cfg = write_config(dir.path(), "bad.toml", &bad);
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("basis_degrees"),
        "error does not name the key: {stderr}"
    );
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replace("seed = 11\n", "");
    let cfg = write_config(dir.path(), "noseed.toml", &bad);
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn nonpositive_tolerance_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replace("tolerance_rel = 1e-12", "tolerance_rel = 0.0");
    let cfg = write_config(dir.path(), "zerotol.toml", &bad);
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("strictly positive"));
}

#[test]
fn reruns_are_byte_identical_and_parallel_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_CONFIG);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    assert!(run(&["run", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()])
        .status
        .success());
    assert!(run(&["run", cfg.to_str().unwrap(), "--out", out_b.to_str().unwrap()])
        .status
        .success());
    assert!(run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--parallel"
    ])
    .status
    .success());
    assert_eq!(read_dir_sorted(&out_a), read_dir_sorted(&out_b));
    assert_eq!(read_dir_sorted(&out_a), read_dir_sorted(&out_c));
}

#[test]
fn only_filter_selects_and_rejects_unknown_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_CONFIG);
    let out_dir = dir.path().join("only");
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--only",
        "exact",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let names: Vec<String> = read_dir_sorted(&out_dir).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["exact.csv".to_string(), "summary.txt".to_string()]);

    let missing = run(&["run", cfg.to_str().unwrap(), "--only", "nope"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn failing_check_sets_nonzero_exit_and_marks_summary() {
    let dir = tempfile::tempdir().unwrap();
    // an impossible tolerance on the triangle gap
    let body = SMALL_CONFIG.replace("tolerance_rel = 0.1", "tolerance_rel = 1e-300");
    let cfg = write_config(dir.path(), "cfg.toml", &body);
    let out_dir = dir.path().join("fail");
    let out = run(&["run", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let summary = fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("FAIL"));
}

#[test]
fn empty_experiment_list_reports_zero_checks_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let head = SMALL_CONFIG.split("[[experiment]]").next().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", head);
    let out_dir = dir.path().join("empty");
    let out = run(&["run", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let summary = fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("0 checks"));
}

#[test]
fn csv_has_metadata_and_documented_paths_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_CONFIG);
    let out_dir = dir.path().join("meta");
    assert!(run(&["run", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .status
        .success());
    let paths_csv = fs::read_to_string(out_dir.join("paths_out.csv")).unwrap();
    let mut lines = paths_csv.lines();
    assert!(lines.next().unwrap().starts_with("# seed: 11"));
    assert!(lines.next().unwrap().starts_with("# git: "));
    assert!(lines.next().unwrap().starts_with("# config_sha256: "));
    assert_eq!(lines.next().unwrap(), "path_id,t,x,w,jump_sum");
}

#[test]
fn list_and_schema_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_CONFIG);
    let out = run(&["list", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("exact (kind jump_exactness)"));
    assert!(stdout.contains("3 experiments"));

    let schema = run(&["schema"]);
    assert!(schema.status.success());
    assert!(String::from_utf8_lossy(&schema.stdout).contains("[[experiment]]"));
}

#[test]
fn unknown_kind_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL_CONFIG.replace("kind = \"jump_exactness\"", "kind = \"jump_exactnes\"");
    let cfg = write_config(dir.path(), "badkind.toml", &bad);
    let out = run(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("jump_exactnes"));
}
