use std::path::Path;
use std::process::{Command, Output};

use lance_cli::config::{parse_config, RunConfig};

const TINY: &str = r#"{
  "dataset": {"source": "synthetic",
              "spec": {"height": 12, "width": 12, "channels": 3, "classes": 10, "rank": 2, "seed": 1},
              "train_samples": 256, "test_samples": 128},
  "epochs": 1, "batch_size": 32, "calib_batches": 3
}"#;

fn lance(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lance"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn resolved_config_round_trips() {
    let dir = tiny_dir();
    ok(lance(dir.path(), &["--config", "tiny.json", "--out", "r", "--lr", "0.02", "estimate", "--deterministic"]));
    let text = std::fs::read_to_string(dir.path().join("r/resolved_config.json")).unwrap();
    let cfg = parse_config(&text).unwrap();
    assert_eq!(cfg.lr, 0.02);
    assert_eq!(cfg.batch_size, 32);
    assert!(cfg.deterministic);
    assert_eq!(cfg.to_json() + "\n", text);
    assert_ne!(cfg, RunConfig::default());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"cl": {"stream": {"source": "synthetic", "seed": "x"}}}"#).unwrap();
    let out = lance(dir.path(), &["--config", "bad.json", "estimate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cl.stream"), "{err}");

    std::fs::write(dir.path().join("bad.json"), r#"{"batch_size": 0}"#).unwrap();
    let err = String::from_utf8_lossy(&lance(dir.path(), &["--config", "bad.json", "finetune"]).stderr).to_string();
    assert!(err.contains("batch_size"), "{err}");
}

#[test]
fn lance_policy_without_bank_is_an_error() {
    let dir = tiny_dir();
    let out = lance(dir.path(), &["--config", "tiny.json", "--out", "x", "finetune", "--policy", "lance"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bank"));
}

#[test]
fn calibrate_requires_checkpoint() {
    let dir = tiny_dir();
    let out = lance(dir.path(), &["--config", "tiny.json", "--out", "x", "calibrate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn estimate_flags_match_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(lance(dir.path(), &["estimate", "--dims", "8,8,8", "--ranks", "1,1,1", "--out-dim", "4"]));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["s_mem"].as_f64().unwrap(), 512.0 / 25.0);
    assert_eq!(v["layers"][0]["full_elements"], 512);
}

#[test]
fn deterministic_pipeline_is_byte_identical() {
    let dir = tiny_dir();
    let run = |tag: &str| {
        let base = format!("{tag}/base");
        let bank = format!("{tag}/bank");
        let tune = format!("{tag}/tune");
        ok(lance(dir.path(), &["--config", "tiny.json", "--deterministic", "--out", &base, "finetune"]));
        let ckpt = format!("{base}/checkpoint.bin");
        ok(lance(dir.path(), &["--config", "tiny.json", "--deterministic", "--out", &bank, "calibrate", "--checkpoint", &ckpt]));
        let bin = format!("{bank}/bank.bin");
        ok(lance(
            dir.path(),
            &["--config", "tiny.json", "--deterministic", "--out", &tune, "--checkpoint", &ckpt, "--bank", &bin, "--policy", "lance", "finetune"],
        ));
    };
    run("a");
    run("b");
    for file in ["base/checkpoint.bin", "bank/bank.bin", "bank/calibrate.json", "tune/records.jsonl", "tune/summary.json", "tune/checkpoint.bin"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
    let records = std::fs::read_to_string(dir.path().join("a/tune/records.jsonl")).unwrap();
    assert!(!records.contains("wall_time"));
    assert!(records.contains("grad_angle_degrees"));
}
