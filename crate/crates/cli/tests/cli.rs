//! End-to-end checks of the binary: subcommands, artifacts, exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freqlora"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("SPECTRAL_LORA_SEED")
        .output()
        .expect("binary runs")
}

const TINY_CONFIG: &str = r#"
seed = 5
n_programs = 30
epochs = 1
lr = 2e-3
rank = 2
warmup_steps = 2
dropout = 0.0

[model]
vocab_size = 29
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 16
max_seq = 64
"#;

#[test]
fn usage_error_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["no-such-subcommand"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "eval", "compare-opt", "sweep", "spectrum", "gen-data"] {
        assert!(text.contains(sub), "missing subcommand {sub} in help");
    }
}

#[test]
fn runtime_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--checkpoint", "missing.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "gen-data",
            "--seed",
            "9",
            "--n-programs",
            "50",
            "--language",
            "lang_b",
            "--out-dir",
            "data",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let train = std::fs::read_to_string(dir.path().join("data/train.tsv")).unwrap();
    let test = std::fs::read_to_string(dir.path().join("data/test.tsv")).unwrap();
    assert!(train.starts_with("# vocab_hash="));
    assert!(train.contains("# language=lang_b"));
    assert!(test.contains("# split=test"));
    assert_eq!(train.lines().filter(|l| !l.starts_with('#')).count(), 45);
    assert_eq!(test.lines().filter(|l| !l.starts_with('#')).count(), 5);
}

#[test]
fn train_eval_spectrum_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), TINY_CONFIG).unwrap();

    let out = run(
        &["train", "--config", "cfg.toml", "--out-dir", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    for artifact in ["metrics.csv", "adapters.ckpt", "config.toml", "report.txt"] {
        assert!(dir.path().join("run").join(artifact).exists(), "{artifact}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics
        .starts_with("step,task_loss,fourier_loss,total_loss,lr,grad_norm,wall_ms"));

    let out = run(
        &[
            "eval",
            "--config",
            "cfg.toml",
            "--checkpoint",
            "run/adapters.ckpt",
            "--merged",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pass_at_1 = "));
    assert!(text.contains("merged = true"));

    let out = run(
        &[
            "spectrum",
            "--config",
            "cfg.toml",
            "--checkpoint",
            "run/adapters.ckpt",
            "--out-dir",
            "spectra",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let files: Vec<_> = std::fs::read_dir(dir.path().join("spectra"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(!files.is_empty());
    assert!(files.iter().all(|f| f.starts_with("spectrum_") && f.ends_with(".csv")));
}

#[test]
fn seed_env_var_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), TINY_CONFIG).unwrap();
    let out = bin()
        .args(["train", "--config", "cfg.toml", "--out-dir", "run"])
        .current_dir(dir.path())
        .env("SPECTRAL_LORA_SEED", "777")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let sidecar = std::fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(sidecar.contains("seed = 777"), "{sidecar}");

    let out = bin()
        .args(["train", "--config", "cfg.toml"])
        .current_dir(dir.path())
        .env("SPECTRAL_LORA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
