use std::path::Path;
use std::process::{Command, Output};

fn ckv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckv"))
        .current_dir(dir)
        .env_remove("CKV_OUT_ROOT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: [&str; 4] = ["--num-users", "40", "--epochs", "1"];

fn train(dir: &Path, run: &str) {
    let mut args = vec!["train", "--out", "o", "--run-id", run];
    args.extend(SMALL);
    let out = ckv(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ckv(dir.path(), &["train", "--bogus"])), 2);
    assert_eq!(
        code(&ckv(dir.path(), &["train", "--d-u", "0", "--d-g", "0"])),
        2
    );
    assert_eq!(code(&ckv(dir.path(), &["sweep", "--axis", "heads"])), 2);
}

#[test]
fn train_writes_hashed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "r");
    let text = std::fs::read_to_string(dir.path().join("o/r/metrics.csv")).unwrap();
    let mut lines = text.lines();
    let hash = lines
        .next()
        .unwrap()
        .strip_prefix("# config_hash=")
        .unwrap();
    assert_eq!(hash.len(), 16);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(
        lines.next().unwrap(),
        "run_id,mode,d_u,d_g,m,auc,gauc,logloss,compression_rate"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "r");
    assert_eq!(row[8], "0.140625");
    for f in ["config.txt", "epochs.csv", "checkpoint.ckv"] {
        assert!(dir.path().join("o/r").join(f).exists(), "{f}");
    }
}

#[test]
fn out_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--run-id", "e"];
    args.extend(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_ckv"))
        .current_dir(dir.path())
        .env("CKV_OUT_ROOT", "envroot")
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("envroot/e/metrics.csv").exists());
}

#[test]
fn ablation_arms_share_one_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--out", "o", "--run-id", "ab"];
    args.extend(SMALL);
    assert_eq!(code(&ckv(dir.path(), &args)), 0);
    let text = std::fs::read_to_string(dir.path().join("o/ab/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[1] == rows[0][1]));
    let arms: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert!(arms.contains(&"baseline") && arms.contains(&"kv_all"));
}

#[test]
fn prefill_then_decode() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "r");
    let shared = [
        "--checkpoint",
        "o/r/checkpoint.ckv",
        "--dataset",
        "o/r/dataset",
    ];
    let mut args = vec!["prefill", "--out", "o", "--run-id", "r", "--cache", "cache"];
    args.extend(shared);
    assert_eq!(code(&ckv(dir.path(), &args)), 0);

    let decode = |user: &str| {
        let mut args = vec![
            "decode", "--cache", "cache", "--user", user, "--target", "5",
        ];
        args.extend(shared);
        ckv(dir.path(), &args)
    };
    let hit = decode("3");
    assert_eq!(code(&hit), 0);
    let stdout = String::from_utf8(hit.stdout).unwrap();
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    let p: f64 = row[2].parse().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(code(&decode("999")), 2);
}

#[test]
fn corrupt_checkpoint_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "r");
    std::fs::write(dir.path().join("bad.ckv"), b"garbage").unwrap();
    let out = ckv(
        dir.path(),
        &[
            "decode",
            "--checkpoint",
            "bad.ckv",
            "--cache",
            "c",
            "--dataset",
            "o/r/dataset",
            "--user",
            "1",
            "--target",
            "1",
        ],
    );
    assert_eq!(code(&out), 4);
}
