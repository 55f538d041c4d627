use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn npiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npiseg"))
        .args(args)
        .env_remove("NPISEG_CHECKPOINT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = npiseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

const SMALL: [&str; 6] = ["--points", "96", "--min-objects", "2", "--max-objects", "3"];

fn gen(dir: &Path, count: &str, seed: &str) {
    let mut args = vec!["gen-scenes", "--out", dir.to_str().unwrap(), "--count", count, "--seed", seed];
    args.extend(SMALL);
    ok(&args);
}

fn train(out: &Path, seed: &str) {
    let mut args = vec![
        "train",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        seed,
        "--epochs",
        "1",
        "--train-scenes",
        "3",
        "--feature-dim",
        "8",
        "--hidden-dim",
        "16",
        "--mc-samples",
        "3",
        "--quiet",
    ];
    args.extend(SMALL);
    ok(&args);
}

#[test]
fn gen_scenes_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, "4", "7");
    gen(&b, "4", "7");
    gen(&c, "4", "8");
    let da = dir_contents(&a);
    assert_eq!(da.len(), 4);
    assert_eq!(da[0].0, "scene_0000.npsc");
    assert!(da[0].1.starts_with(b"NPSC1 96 "));
    assert_eq!(da, dir_contents(&b));
    assert_ne!(da, dir_contents(&c));
}

#[test]
fn train_eval_episode_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let scenes = t.path().join("scenes");
    gen(&scenes, "3", "1");
    let ckpt = t.path().join("m.json");
    train(&ckpt, "5");
    let csv = std::fs::read_to_string(t.path().join("m.loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,mean_loss,mean_ce,mean_dice,mean_kl\n0,"));

    let again = t.path().join("m2.json");
    train(&again, "5");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let report = t.path().join("r.json");
    let stdout = ok(&[
        "eval",
        "--scenes",
        scenes.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--budget",
        "5",
    ]);
    assert!(stdout.contains("IoU@5"), "{stdout}");
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["iou_at"]["5"].is_number());
    assert!(r["noc_at"]["0.8"].is_number());
    assert_eq!(r["episodes"], 3);

    let report2 = t.path().join("r2.json");
    ok(&[
        "eval",
        "--scenes",
        scenes.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--report",
        report2.to_str().unwrap(),
        "--budget",
        "5",
    ]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report2).unwrap());

    let out = ok(&[
        "episode",
        "--scene",
        scenes.join("scene_0000.npsc").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--budget",
        "3",
    ]);
    assert!(out.starts_with("round  1"), "{out}");
}

#[test]
fn grad_check_passes_on_fresh_init() {
    let out = ok(&["grad-check"]);
    assert!(out.contains("max relative error"), "{out}");
    let err: f64 = out
        .split("max relative error ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn exit_codes() {
    let out = npiseg(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(npiseg(&["--help"]).status.code(), Some(0));
    assert_eq!(npiseg(&["serve"]).status.code(), Some(1));

    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    let scenes = t.path().join("s");
    gen(&scenes, "1", "0");
    let eval = |ckpt: &Path| npiseg(&["eval", "--scenes", scenes.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(eval(&bad).status.code(), Some(1));
    assert_eq!(eval(&t.path().join("missing.json")).status.code(), Some(2));
    let out = npiseg(&["gen-scenes", "--out", t.path().join("x").to_str().unwrap(), "--min-objects", "5", "--max-objects", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
