//! End-to-end runs of the `apex` binary.

use std::path::Path;
use std::process::{Command, Output};

fn apex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apex")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn vanilla_train_writes_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, ckpt) = (dir.path().join("m.csv"), dir.path().join("v.ckpt"));
    let out = apex(&[
        "train", "--stages", "1", "--no-expansion", "--synthetic-tokens", "40000", "--tokens-per-stage", "8192",
        "--csv", s(&csv), "--out", s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("stage,step,tokens,train_loss,eval_ppl,wall_ms"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    let last = rows.last().unwrap();
    assert_eq!(last.len(), 6);
    assert_eq!(last[1], "16");
    assert_eq!(last[2], "8192");
    assert!(last[4].parse::<f64>().unwrap().is_finite());
    assert!(ckpt.exists());
}

#[test]
fn live_checkpoint_evaluates_the_same_after_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let (live, fused) = (dir.path().join("live.ckpt"), dir.path().join("fused.ckpt"));
    let data = ["--synthetic-tokens", "40000"];
    let out = apex(&[&["train", "--stages", "1", "--tokens-per-stage", "8192", "--keep-live", "--out", s(&live)], &data[..]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(apex(&["fuse", "--checkpoint", s(&live), "--out", s(&fused)]).status.success());
    let a = apex(&[&["eval", "--checkpoint", s(&live)], &data[..]].concat());
    let b = apex(&[&["eval", "--checkpoint", s(&fused)], &data[..]].concat());
    assert!(a.status.success() && b.status.success());
    let loss = |o: &Output| {
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        let words: Vec<&str> = text.split_whitespace().collect();
        let at = words.iter().position(|w| *w == "loss").expect("a loss field");
        words[at + 1].parse::<f64>().unwrap()
    };
    assert!((loss(&a) - loss(&b)).abs() < 1e-5);
}

#[test]
fn mask_eval_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let data = ["--synthetic-tokens", "40000"];
    let out = apex(&[&["train", "--stages", "1", "--no-expansion", "--tokens-per-stage", "8192", "--out", s(&ckpt)], &data[..]].concat());
    assert!(out.status.success());
    for which in ["top", "min", "random"] {
        let out = apex(&[&["mask-eval", "--checkpoint", s(&ckpt), "--which", which], &data[..]].concat());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["which", "fraction", "masked", "base_loss", "masked_loss", "delta"]);
        let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(row[0], which);
        // floor(0.1 * 4) heads + floor(0.1 * 256) channels, per layer
        assert_eq!(row[2], "50");
    }
}

#[test]
fn bad_invocations_exit_non_zero() {
    assert_eq!(apex(&["frobnicate"]).status.code(), Some(2));
    let missing = apex(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());
    let bad_k = apex(&["train", "--k-mha", "0.5", "--synthetic-tokens", "20000"]);
    assert_eq!(bad_k.status.code(), Some(1));
}
