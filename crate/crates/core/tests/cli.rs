use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lfpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfpa")).args(args).output().unwrap()
}

fn json_line(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL: &str = r#"{
  "task": {"rows": 3, "cols": 3, "n_source": 96, "n_target": 96, "n_source_eval": 48},
  "train": {
    "model": {"patterns": 6, "hidden": 12, "feature_dim": 6, "disc_hidden": [8]},
    "steps_phase1": 30, "steps_phase2": 10, "steps_phase3": 20,
    "batch_source": 16, "batch_target": 16, "probe_every": 10, "probe_size": 32
  },
  "seeds": [0]
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_reports_success() {
    let v = json_line(&lfpa(&["gradcheck", "--seed", "3", "--points", "2"]));
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-5);
    assert!(v["checks"].as_u64().unwrap() > 0);
    assert_eq!(v["objectives"].as_array().unwrap().len(), 11);
}

#[test]
fn generate_train_and_evaluate_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();
    let gen = json_line(&lfpa(&["gen-data", "--config", &cfg, "--seed", "4", "--out", data, "--sequential"]));
    assert_eq!(gen["n_source"], 96);
    assert_eq!(gen["seed"], 4);

    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let out = out.to_str().unwrap();
        let train = json_line(&lfpa(&["train", "--config", &cfg, "--data", data, "--out", out]));
        assert_eq!(train["steps"], serde_json::json!([30, 10, 20]));
        assert!(Path::new(out).join("train_log.csv").exists());
        let ckpt = Path::new(out).join("checkpoint.lfpc");
        let report = dir.path().join(format!("{name}.json"));
        let eval = json_line(&lfpa(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data,
            "--out",
            report.to_str().unwrap(),
        ]));
        let saved: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert_eq!(saved, eval);
        let acc = eval["target_accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        runs.push((train["checkpoint_sha256"].clone(), eval));
    }
    assert_eq!(runs[0], runs[1]);

    let ckpt = dir.path().join("a/checkpoint.lfpc");
    let emb = dir.path().join("emb.csv");
    let v = json_line(&lfpa(&[
        "export-embed",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data,
        "--kind",
        "holistic",
        "--out",
        emb.to_str().unwrap(),
    ]));
    assert_eq!(v["rows"], 48 + 96);
    assert_eq!(std::fs::read_to_string(&emb).unwrap().lines().count(), 48 + 96 + 1);
}

#[test]
fn sweep_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let csv = dir.path().join("neg.csv");
    let v = json_line(&lfpa(&["sweep", "--config", &cfg, "--suite", "negative_transfer", "--out", csv.to_str().unwrap()]));
    assert_eq!(v["rows"], 3);
    assert_eq!(v["aborted"], 0);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [&[][..], &["--bogus"], &["frob"], &["gradcheck", "--seed", "x"], &["train"]] {
        let out = lfpa(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(lfpa(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_configs_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"train": {"lr_step23": -1}}"#, "train.lr_step23"),
        (r#"{"task": {"shift": {"scale": 0}}}"#, "task.shift.scale"),
        (r#"{"train": {"weights": {"lambda_h": -0.5}}}"#, "train.weights.lambda_h"),
        (r#"{"train": {"stepz": 3}}"#, "stepz"),
        (r#"{"removed_classes": 4}"#, "removed_classes"),
    ];
    for (text, key) in cases {
        let cfg = write_config(dir.path(), text);
        let out = lfpa(&["gen-data", "--config", &cfg, "--out", dir.path().join("d").to_str().unwrap()]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(1), "{text}: {err}");
        assert!(err.contains(key), "{text}: {err}");
    }
    let out = lfpa(&["sweep", "--suite", "tables", "--out", "/dev/null"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("negative_transfer"));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = lfpa(&[
        "eval",
        "--checkpoint",
        dir.path().join("none.lfpc").to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
