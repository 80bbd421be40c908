use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn stforge(args: &[&str], envs: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .envs(envs.iter().copied())
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn mt_config(dir: &Path, corpus: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "recipe": "mt",
        "exp_dir": dir.join("exp"),
        "data": {"train": corpus, "eval": {"dev": corpus}, "tgt_lang": "fr"},
        "subword": {"vocab_size": 80},
        "model": {"d_model": 16, "heads": 2, "d_ff": 32, "enc_blocks": 1, "dec_blocks": 1, "dropout": 0.0},
        "train": {"epochs": 2, "warmup_steps": 10, "keep_last_k": 2},
        "decode": {"beam_size": 2},
        "average_last": 2
    });
    let path = dir.join("mt.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_resume_and_single_stages() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = stforge(&["make-corpus", "--seed", "4", "--n", "10", "--out", corpus.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(corpus.join("wav.scp").exists() && corpus.join("text.fr").exists());

    let cfg = mt_config(dir.path(), &corpus);
    let cfg = cfg.to_str().unwrap();
    let out = stforge(&["run", "--config", cfg], &[("STFORGE_THREADS", "1")]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).lines().filter(|l| l.ends_with("done")).count(), 4);

    let out = stforge(&["run", "--config", cfg], &[]);
    assert!(out.status.success());
    assert!(text(&out.stdout).lines().all(|l| l.ends_with("up to date")), "{}", text(&out.stdout));

    let score = dir.path().join("exp/exp/decode_dev/score.json");
    fs::remove_file(&score).unwrap();
    for sub in ["decode", "score"] {
        let out = stforge(&[sub, "--config", cfg], &[]);
        assert!(out.status.success(), "{sub}: {}", text(&out.stderr));
    }
    assert!(score.exists());
    let out = stforge(&["train", "--config", cfg], &[]);
    assert!(out.status.success());
    assert_eq!(text(&out.stdout).trim(), "stage 4: up to date");
}

#[test]
fn failures_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_corpus");
    let cfg = mt_config(dir.path(), &missing);
    let cfg = cfg.to_str().unwrap();

    let out = stforge(&["prep", "--config", cfg], &[]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("stage 0 failed"), "{}", text(&out.stderr));

    let out = stforge(&["run", "--config", cfg, "--start", "3", "--stop", "4"], &[]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("invalid stage range"), "{}", text(&out.stderr));

    let out = stforge(&["run", "--config", cfg], &[("STFORGE_THREADS", "0")]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("STFORGE_THREADS"));

    let out = stforge(&["make-corpus", "--seed", "1", "--n", "0", "--out", dir.path().join("c").to_str().unwrap()], &[]);
    assert!(!out.status.success());

    let out = stforge(&["train", "--config", dir.path().join("absent.json").to_str().unwrap()], &[]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("absent.json"));
}
