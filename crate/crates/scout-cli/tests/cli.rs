//! End-to-end checks of the installed binary: a tiny generate→train→eval
//! round trip, regeneration determinism, and the exit-code contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 9

[generator]
n_scenes = 300
embed_dim = 32

[model]
embed_dim = 32
attn_dim = 16
n_heads = 2
n_queries = 2
hidden_dim = 32
n_residual_blocks = 1
dropout_p = 0.1

[train]
epochs = 2
batch_size = 32
early_stop_patience = 1
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

fn scout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scout"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = scout(args);
    assert!(
        out.status.success(),
        "expected success for {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    scout(args).status.code().expect("exit code")
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();

    run_ok(&["--config", cfg, "--output-dir", out_s, "gen"]);
    for part in [
        "teacher_train",
        "teacher_test",
        "surrogate_train",
        "surrogate_val",
        "surrogate_test",
    ] {
        assert!(
            out.join("dataset").join(format!("{part}.jsonl")).is_file(),
            "{part} dataset written"
        );
    }
    assert!(out.join("manifest-gen.json").is_file());

    run_ok(&["--config", cfg, "--output-dir", out_s, "train"]);
    assert!(out.join("checkpoint-full.ckpt").is_file());
    assert!(out.join("report-full.json").is_file());

    let test_set = out.join("dataset/surrogate_test.jsonl");
    let stdout = run_ok(&[
        "--config",
        cfg,
        "--output-dir",
        out_s,
        "eval",
        "--dataset",
        test_set.to_str().unwrap(),
    ]);
    assert!(stdout.contains("Macro"), "eval prints the metrics table");
    assert!(out.join("eval-surrogate_test-truth.txt").is_file());
    assert!(out.join("eval-surrogate_test-truth.json").is_file());
}

#[test]
fn regeneration_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("run");
    let args = ["--config", cfg, "--output-dir", out.to_str().unwrap(), "gen"];

    run_ok(&args);
    let files = ["dataset/surrogate_test.jsonl", "manifest-gen.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    run_ok(&args);
    for (file, before) in files.iter().zip(&first) {
        let after = fs::read(out.join(file)).unwrap();
        assert_eq!(&after, before, "{file} must be byte-identical across reruns");
    }
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();

    // Missing dataset file → I/O class.
    let missing = tmp.path().join("nope.jsonl");
    assert_eq!(
        exit_code(&[
            "--config",
            cfg,
            "--output-dir",
            out_s,
            "eval",
            "--dataset",
            missing.to_str().unwrap(),
        ]),
        3
    );

    // Unknown ablation variant → config class (checked before any I/O).
    assert_eq!(
        exit_code(&[
            "--config",
            cfg,
            "--output-dir",
            out_s,
            "train",
            "--variant",
            "nope",
        ]),
        2
    );

    // Unreadable config file → I/O class.
    assert_eq!(exit_code(&["--config", "/no/such/config.toml", "gen"]), 3);
}

#[test]
fn verify_sabotage_is_caught() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let args = [
        "--output-dir",
        out.to_str().unwrap(),
        "verify",
        "--sabotage-grad",
    ];
    let result = scout(&args);
    assert_eq!(result.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("FAIL"), "sabotaged gradient must be flagged");
}
