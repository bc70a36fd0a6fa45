//! The command-line interface end to end.

mod common;

use common::{c2mf, code, ok, path_str, write_config, SMALL};

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = path_str(&cfg);
    let out = path_str(dir.path());
    assert_eq!(code(&c2mf(&["train", "--bogus"])), 1);
    assert_eq!(code(&c2mf(&["train", "--out", out])), 1);
    assert_eq!(code(&c2mf(&["train", "--config", cfg, "--out", out, "--method", "mean"])), 1);
    assert_eq!(code(&c2mf(&["sweep", "--config", cfg, "--out", out, "--lambda-test", "1.5"])), 1);
    let bad = write_config(dir.path(), &format!("unknown_key = 1\n{SMALL}"));
    let e = c2mf(&["gen-data", "--config", path_str(&bad), "--out", out]);
    assert_eq!(code(&e), 1);
    let stderr = String::from_utf8_lossy(&e.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "));
    assert_eq!(code(&c2mf(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two_and_leave_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = path_str(&cfg);
    let run = dir.path().join("run");
    let missing = dir.path().join("missing");
    let e = c2mf(&["train", "--config", cfg, "--out", path_str(&run), "--data", path_str(&missing)]);
    assert_eq!(code(&e), 2);
    assert!(!run.exists());

    let e = c2mf(&["sweep", "--config", cfg, "--out", path_str(&run)]);
    assert_eq!(code(&e), 2);
    assert!(!run.exists());

    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("checkpoint.json"), "{\"format\": \"c2mf-checkpoint\"").unwrap();
    assert_eq!(code(&c2mf(&["eval", "--config", cfg, "--out", path_str(&run)])), 2);
    assert!(!run.join("metrics.csv").exists());
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("learning_rate = 0.01", "learning_rate = 1e300");
    let cfg = write_config(dir.path(), &text);
    let run = dir.path().join("run");
    let e = c2mf(&["train", "--config", path_str(&cfg), "--out", path_str(&run), "--regime", "joint"]);
    assert_eq!(code(&e), 3, "{}", String::from_utf8_lossy(&e.stderr));
    assert!(!run.join("checkpoint.json").exists());
}

#[test]
fn pipeline_writes_versioned_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = path_str(&cfg);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (data_s, run_s) = (path_str(&data), path_str(&run));
    ok(&["gen-data", "--config", cfg, "--out", data_s]);
    for f in ["train.csv", "validation.csv", "test.csv", "clean-test.csv", "dataset.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    ok(&["train", "--config", cfg, "--data", data_s, "--out", run_s, "--method", "c2wm"]);
    assert!(run.join("checkpoint.json").exists() && run.join("run-log.json").exists());

    ok(&["eval", "--config", cfg, "--data", data_s, "--out", run_s]);
    let first = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(first.lines().count(), 4, "{first}");
    ok(&["eval", "--config", cfg, "--data", data_s, "--out", run_s]);
    let second = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(second.starts_with(&first));
    assert_eq!(second.lines().count(), 7);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    ok(&["sweep", "--config", cfg, "--data", data_s, "--out", run_s]);
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().collect();
    assert!(rows[0].starts_with("schema_version,config_hash,seed,"));
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",c2wm,decoupled,0,"), "{}", rows[1]);
    assert!(rows[2].contains(",c2wm,decoupled,1,"), "{}", rows[2]);
    let sidecar = std::fs::read_to_string(run.join("results.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(sidecar.lines().next().unwrap()).unwrap();
    assert_eq!(v["config"]["seed"], 5);
    assert_eq!(v["command"], "sweep");

    let out = ok(&["grad-check", "--config", cfg, "--data", data_s, "--out", run_s]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("worst:"));
}

#[test]
fn clean_sweep_at_zero_has_no_rmis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = path_str(&cfg);
    let run = dir.path().join("run");
    let run_s = path_str(&run);
    ok(&["train", "--config", cfg, "--out", run_s, "--method", "dpc"]);
    ok(&["sweep", "--config", cfg, "--out", run_s, "--lambda-test", "0"]);
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().collect();
    assert_eq!(rows.len(), 2);
    let header: Vec<&str> = rows[0].split(',').collect();
    let row: Vec<&str> = rows[1].split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("num_corrupted"), "0");
    assert_eq!(col("rmis"), "");
}

#[test]
fn identical_runs_in_different_directories_match_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = path_str(&cfg);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let data = root.join("data");
        let run = root.join("run");
        ok(&["gen-data", "--config", cfg, "--out", path_str(&data)]);
        ok(&["train", "--config", cfg, "--data", path_str(&data), "--out", path_str(&run)]);
        ok(&["sweep", "--config", cfg, "--data", path_str(&data), "--out", path_str(&run)]);
        ok(&["eval", "--config", cfg, "--data", path_str(&data), "--out", path_str(&run)]);
        outputs.push(root);
    }
    for f in [
        "data/train.csv",
        "data/test.csv",
        "data/clean-test.csv",
        "data/dataset.json",
        "run/checkpoint.json",
        "run/results.csv",
        "run/rmis.csv",
        "run/results.jsonl",
        "run/metrics.csv",
        "run/metrics.jsonl",
    ] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
