use std::path::Path;
use std::process::{Command, Output};

use dircp::config::{RunConfig, SEED_ENV};

const SMALL: &str = r#"
[grid]
height = 32
width = 32
cell_size = 2.0

[train]
steps = 3
batch = 2

[eval]
n_seeds = 2
budgets = [0.1, 0.2]
"#;

fn dircp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dircp"))
        .args(args)
        .current_dir(dir)
        .env_remove(SEED_ENV)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dircp(&["run", "does/not/exist.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does/not/exist.toml"), "{}", stderr(&out));
}

#[test]
fn invalid_values_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[comms]\nq_max = 3.0\nunknown = 1\n").unwrap();
    let out = dircp(&["run", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown"), "{}", stderr(&out));

    let cfg = small_config(tmp.path());
    for args in [
        vec!["sweep", cfg.as_str(), "--budgets"],
        vec!["sweep", cfg.as_str(), "--budgets", ""],
        vec!["train", cfg.as_str(), "--steps", "0"],
        vec!["run", cfg.as_str(), "--budget", "1.5"],
    ] {
        let out = dircp(&args, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn help_lists_every_config_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dircp(&["--help"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "q_max", "sigma1", "sigma2", "interest_weights", "n_heads", "tau", "lr", "n_seeds", "budgets", "sigmas",
        "formats", SEED_ENV,
    ] {
        assert!(text.contains(key), "--help is missing {key}");
    }
    let sub = dircp(&["sweep", "--help"], tmp.path());
    assert!(String::from_utf8_lossy(&sub.stdout).contains("q_max"));
}

#[test]
fn run_writes_reports_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut files = Vec::new();
    for out_dir in ["a", "b"] {
        let out = dircp(&["run", &cfg, "--out", out_dir], tmp.path());
        assert!(out.status.success(), "{}", stderr(&out));
        let dir = tmp.path().join(out_dir);
        for name in ["report.json", "report.csv", "attention_trace.csv", "effective_config.toml"] {
            assert!(dir.join(name).is_file(), "{name} missing");
        }
        files.push(
            ["report.json", "report.csv", "attention_trace.csv"].map(|n| std::fs::read(dir.join(n)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
    let reports: serde_json::Value = serde_json::from_slice(&files[0][0]).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    let effective = std::fs::read_to_string(tmp.path().join("a/effective_config.toml")).unwrap();
    let parsed = RunConfig::from_toml_str(&effective).unwrap();
    assert_eq!(parsed.grid.height, 32);
    assert_eq!(parsed.output.directory, "a");
}

#[test]
fn sweep_writes_tables_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = dircp(
        &["sweep", &cfg, "--out", "s", "--sigmas", "0,1", "--seeds", "2", "--jobs", "1"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = tmp.path().join("s");
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    // 2 budgets x 2 sigmas x 3 methods x 2 IoU thresholds.
    assert_eq!(csv.lines().count(), 1 + 24);
    for name in ["sweep.json", "ap_iou0.50_vs_budget.svg", "masked_ap_iou0.70_vs_budget.svg"] {
        assert!(dir.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn train_with_zero_lr_writes_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = dircp(&["train", &cfg, "--lr", "0", "--out", "t"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = std::fs::read(tmp.path().join("t/scorer.dcpw")).unwrap();
    let init = RunConfig::from_toml_str(SMALL).unwrap().scorer_init();
    assert_eq!(bytes, init.to_checkpoint());
    let log = std::fs::read_to_string(tmp.path().join("t/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn toy_training_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = dircp(&["train", &cfg, "--steps", "30", "--out", "t"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(tmp.path().join("t/train_log.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}

#[test]
fn seed_variable_selects_the_exported_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed: Option<&str>, out_dir: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dircp"));
        cmd.args(["export-scene", "--out", out_dir]).current_dir(tmp.path());
        match seed {
            Some(s) => cmd.env(SEED_ENV, s),
            None => cmd.env_remove(SEED_ENV),
        };
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read_to_string(tmp.path().join(out_dir).join("scene.json")).unwrap()
    };
    let default = run(None, "d");
    let seeded = run(Some("5"), "s5");
    assert_ne!(default, seeded);
    assert_eq!(seeded, run(Some("5"), "s5b"));
    let flag = dircp(&["export-scene", "--seed", "5", "--out", "f"], tmp.path());
    assert!(flag.status.success());
    assert_eq!(seeded, std::fs::read_to_string(tmp.path().join("f/scene.json")).unwrap());
    let boxes = std::fs::read_to_string(tmp.path().join("f/truth_boxes.csv")).unwrap();
    assert!(!boxes.trim().is_empty());

    let mut bad = Command::new(env!("CARGO_BIN_EXE_dircp"));
    bad.args(["export-scene", "--out", "x"]).current_dir(tmp.path()).env(SEED_ENV, "abc");
    assert_eq!(bad.output().unwrap().status.code(), Some(2));
}
