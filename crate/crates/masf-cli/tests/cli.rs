//! Binary-level contract tests: exit codes (0 success, 1 run failure,
//! 2 config error), strict config validation, idempotent re-runs, and the
//! report formats, all through the actual `masf` executable.

use std::path::Path;
use std::process::{Command, Output};

fn masf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masf"))
        .args(args)
        .output()
        .expect("spawning the masf binary")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_RUN: &str = r#"
seed = 3

[filter]
n_steps = 30
gap = 15
n_members = 8
method = "masf"

[dynamics]
kind = "lorenz63"

[net]
hidden_width = 16
depth = 2
time_embed_width = 4

[train]
epochs = 5
batch_size = 8

[sampler]
nfe = 10
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).expect("writing config");
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_exits_two_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "typo.toml",
        &TINY_RUN.replace("n_members = 8", "n_member = 8"),
    );
    let out = masf(&["assimilate", "--config", &cfg, "--out", "unused"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("n_member"),
        "error does not name the offending key: {}",
        stderr_of(&out)
    );
}

#[test]
fn missing_config_file_exits_two() {
    let out = masf(&["assimilate", "--config", "/nonexistent.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_one_and_records_failure() {
    let tmp = tempfile::tempdir().unwrap();
    // an absurd learning rate wrecks the first training pass; the posterior
    // ensemble then blows up the forecast, which the filter reports as an
    // in-run failure rather than an error
    let cfg = write_config(
        tmp.path(),
        "blowup.toml",
        &TINY_RUN.replace("epochs = 5", "epochs = 5\nlearning_rate = 1e8"),
    );
    let dir = tmp.path().join("out");
    let out = masf(&["assimilate", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("run failed"), "{}", stderr_of(&out));
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""), "{manifest}");
}

#[test]
fn assimilate_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_RUN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = masf(&["assimilate", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        assert!(stderr_of(&out).contains("run complete"), "{}", stderr_of(&out));
    }
    for file in ["metrics.csv", "estimates.csv", "truth.csv", "measurements.csv"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }

    // same config and seed again: skipped, not recomputed
    let before = std::fs::metadata(a.join("metrics.csv")).unwrap().modified().unwrap();
    let out = masf(&["assimilate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr_of(&out).contains("--force"), "{}", stderr_of(&out));
    let after = std::fs::metadata(a.join("metrics.csv")).unwrap().modified().unwrap();
    assert_eq!(before, after, "skipped run must not rewrite artifacts");

    // --force recomputes
    let out = masf(&[
        "assimilate",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--force",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr_of(&out).contains("run complete"), "{}", stderr_of(&out));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_RUN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    masf(&["assimilate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    let out = masf(&[
        "assimilate",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert_ne!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap(),
        "different seeds must give different trajectories"
    );
}

#[test]
fn simulate_writes_truth_and_measurements() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_RUN);
    let dir = tmp.path().join("sim");
    let out = masf(&["simulate", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let truth = std::fs::read_to_string(dir.join("truth.csv")).unwrap();
    // header plus states for steps 0..=30
    assert_eq!(truth.lines().count(), 32, "{truth}");
    let meas = std::fs::read_to_string(dir.join("measurements.csv")).unwrap();
    // header plus measurements at steps 15 and 30
    assert_eq!(meas.lines().count(), 3, "{meas}");
}

const TINY_SWEEP: &str = r#"
output_dir = "ignored"
seeds = [0, 1]
methods = ["masf", "enkf"]

[base]
seed = 0

[base.filter]
n_steps = 30
gap = 15
n_members = 8

[base.dynamics]
kind = "lorenz63"

[base.net]
hidden_width = 16
depth = 2
time_embed_width = 4

[base.train]
epochs = 5
batch_size = 8

[base.sampler]
nfe = 10
"#;

#[test]
fn sweep_runs_aggregates_and_skips_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TINY_SWEEP);
    let dir = tmp.path().join("sweep");
    let out = masf(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("| method |"), "markdown summary missing: {stdout}");
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.lines().count() >= 3, "{summary}");
    for name in ["masf_seed0", "masf_seed1", "enkf_seed0", "enkf_seed1"] {
        assert!(dir.join(name).join("manifest.json").exists(), "missing {name}");
    }

    let rerun = masf(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(rerun.status.code(), Some(0));
    let progress = stderr_of(&rerun);
    assert_eq!(
        progress.matches("skipped").count(),
        4,
        "all four runs should be skipped: {progress}"
    );
}

#[test]
fn report_renders_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TINY_SWEEP);
    let dir = tmp.path().join("sweep");
    assert_eq!(
        masf(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );

    let json = masf(&["report", "--dir", dir.to_str().unwrap(), "--format", "json"]);
    assert_eq!(json.status.code(), Some(0), "stderr: {}", stderr_of(&json));
    let parsed: serde_json::Value =
        serde_json::from_slice(&json.stdout).expect("report --format json emits valid JSON");
    let rows = parsed.as_array().expect("top-level JSON array");
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["rmse_mean"].as_f64().is_some(), "{row}");
        assert_eq!(row["n_seeds"].as_u64(), Some(2), "{row}");
    }

    let csv = masf(&["report", "--dir", dir.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(csv.status.code(), Some(0));
    let text = String::from_utf8_lossy(&csv.stdout).into_owned();
    assert!(text.starts_with("method,"), "{text}");

    let bogus = masf(&["report", "--dir", dir.to_str().unwrap(), "--format", "yaml"]);
    assert_eq!(bogus.status.code(), Some(2));

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let none = masf(&["report", "--dir", empty.to_str().unwrap()]);
    assert_eq!(none.status.code(), Some(2), "no manifests should be a hard error");
}

#[test]
fn verify_subcommand_passes() {
    let out = masf(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert_eq!(stdout.matches("PASS").count(), 6, "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}
