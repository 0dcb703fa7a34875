//! Process-level exit codes: 0 ok, 2 config error, 3 dependency error.

use std::process::Command;

fn xct() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xct"));
    c.env("XCT_LOG", "error");
    c
}

#[test]
fn unknown_flag_exits_2() {
    let out = xct().args(["synth", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = xct()
        .args(["synth", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_without_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = xct()
        .args(["train", "vq", "--out-dir"])
        .arg(dir.path().join("nothing"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inspect_missing_checkpoint_fails_nonzero() {
    let out = xct()
        .args(["inspect-checkpoint", "/nonexistent/x.xckp"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn help_exits_0() {
    let out = xct().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "reconstruct", "evaluate", "inspect-checkpoint"] {
        assert!(text.contains(sub), "help must list {sub}");
    }
}
