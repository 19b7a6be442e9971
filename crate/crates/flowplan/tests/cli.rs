//! The `flowplan` binary end to end on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowplan::report::{Report, COLUMNS};

const SMOKE: &str = include_str!("fixtures/smoke.toml");

const PIPELINE: [&[&str]; 10] = [
    &["gen-data"],
    &["train-vae"],
    &["train-synth"],
    &["train-planner"],
    &["train-baseline"],
    &["sample"],
    &[
        "edit",
        "--source-index",
        "3",
        "--target",
        "1,2",
        "--source-cond",
        "null",
        "--n-avg",
        "3",
    ],
    &["eval-gen"],
    &["eval-edit"],
    &["ablate"],
];

fn flowplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowplan"))
        .current_dir(dir)
        .env_remove("FLOWPLAN_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    dir
}

fn run_dir(dir: &Path) -> std::path::PathBuf {
    let mut runs: Vec<_> = fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs.pop().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowplan(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in PIPELINE.iter().map(|a| a[0]) {
        assert!(text.contains(cmd), "--help does not mention {cmd}");
    }
}

#[test]
fn missing_dataset_path_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowplan(dir.path(), &["train-vae"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("data.train"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_and_key_are_named() {
    let dir = smoke_dir();
    let out = flowplan(dir.path(), &["--config", "smoke.toml", "eval-gen", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--bogus"), "{}", stderr(&out));

    let out = flowplan(
        dir.path(),
        &["--config", "smoke.toml", "--set", "train.stpes=3", "train-vae"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("train.stpes"), "{}", stderr(&out));

    let out = flowplan(dir.path(), &["--config", "missing.toml", "train-vae"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.toml"), "{}", stderr(&out));
}

#[test]
fn smoke_run_completes_every_subcommand() {
    let dir = smoke_dir();
    for args in PIPELINE {
        let mut full = vec!["--config", "smoke.toml"];
        full.extend_from_slice(args);
        let out = flowplan(dir.path(), &full);
        assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    }
    let run = run_dir(dir.path());
    let header = COLUMNS.join(",");
    for args in PIPELINE {
        let out = run.join(args[0]);
        let report = Report::load(&out).unwrap();
        assert_eq!(report.command, args[0]);
        assert!(!report.rows.is_empty());
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), header);
        assert!(out.join("config.toml").exists());
    }
    let gen = Report::load(&run.join("eval-gen")).unwrap();
    let models: Vec<&str> = gen.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(models, ["two-stage", "baseline"]);
    let edit = Report::load(&run.join("eval-edit")).unwrap();
    let models: Vec<&str> = edit.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(models, ["source", "edit-conditional", "edit-unconditional"]);
    assert!(edit.rows.iter().all(|r| r.kl.is_none() && r.alignment_f1.is_some()));
    let ablate = Report::load(&run.join("ablate")).unwrap();
    assert_eq!(ablate.rows.iter().map(|r| r.d.unwrap()).collect::<Vec<_>>(), [2, 4]);
    assert!(run.join("eval-gen").join("two-stage-0.png").exists());
    for d in [2, 4] {
        assert!(run
            .join("ablate")
            .join(format!("d{d}"))
            .join("planner")
            .join("model.json")
            .exists());
    }

    // datasets are never silently overwritten
    let out = flowplan(dir.path(), &["--config", "smoke.toml", "gen-data"]);
    assert!(!out.status.success());

    // a checkpoint from another format version is refused by name
    let meta = run.join("vae").join("model.json");
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    let out = flowplan(dir.path(), &["--config", "smoke.toml", "train-synth"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("version") && err.contains("vae"), "{err}");
}

#[test]
fn seed_environment_variable_selects_a_new_run() {
    let dir = smoke_dir();
    let base = ["--config", "smoke.toml", "--set", "data.train_count=16", "gen-data"];
    assert!(flowplan(dir.path(), &base).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_flowplan"))
        .current_dir(dir.path())
        .env("FLOWPLAN_SEED", "11")
        .args([
            "--config",
            "smoke.toml",
            "--set",
            "data.train_count=16",
            "gen-data",
            "--force",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let runs = fs::read_dir(dir.path().join("runs")).unwrap().count();
    assert_eq!(runs, 2);
}
