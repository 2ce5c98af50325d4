use std::fs;
use std::path::Path;

use assert_cmd::Command;

fn iscf() -> Command {
    Command::cargo_bin("iscf").unwrap()
}

const SMALL: &[&str] =
    &["--synth", "--synth-count", "4", "--epochs", "1", "--hw", "32", "--base-width", "8", "--val-fraction", "0.25", "--batch-size", "2"];

fn train_small(out: &Path, seed: &str) {
    iscf().args(["train", "--out"]).arg(out).args(SMALL).args(["--seed", seed]).assert().success();
}

#[test]
fn train_smoke_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    train_small(&out, "0");
    for f in ["history.csv", "best.ckpt", "effective-config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 2);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("effective-config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["input_hw"], serde_json::json!([32, 32]));
    assert_eq!(cfg["synth"]["count"], 4);
}

#[test]
fn same_seed_reproduces_history() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_small(&a, "3");
    train_small(&b, "3");
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());
}

#[test]
fn missing_data_dir_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = iscf().args(["train", "--data"]).arg(&missing).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    iscf().args(["train", "--synth", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).assert().code(1);
    iscf().args(["train", "--synth", "--out", "x", "--hw", "48"]).assert().code(1);
    iscf().args(["frobnicate"]).assert().code(1);
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"ISCF\x01\x00").unwrap();
    let out = iscf().args(["eval", "--synth", "--ckpt"]).arg(&ckpt).arg("--out").arg(dir.path().join("e")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error"));
    iscf().args(["eval", "--synth", "--ckpt"]).arg(dir.path().join("none.ckpt")).arg("--out").arg(dir.path().join("e")).assert().code(2);
}

#[test]
fn eval_and_infer_on_exported_data() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_small(&run, "1");
    let data = dir.path().join("data");
    iscf().args(["synth-data", "--synth-count", "3", "--hw", "32", "--seed", "9", "--out"]).arg(&data).assert().success();

    let ev = dir.path().join("eval");
    iscf().args(["eval", "--overlays", "--ckpt"]).arg(run.join("best.ckpt")).arg("--data").arg(&data).arg("--out").arg(&ev).assert().success();
    let overlays = fs::read_dir(ev.join("overlays")).unwrap().count();
    assert_eq!(overlays, 3);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["dsc", "se", "sp", "acc"] {
        assert!(metrics["micro"][key].is_f64() && metrics["per_sample_mean"][key].is_f64());
    }
    assert_eq!(metrics["samples"].as_array().unwrap().len(), 3);
    assert!(ev.join("effective-config.json").is_file());

    let image = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ppm"))
        .unwrap();
    let mask = dir.path().join("pred.pgm");
    iscf().args(["infer", "--ckpt"]).arg(run.join("best.ckpt")).arg("--image").arg(&image).arg("--out").arg(&mask).assert().success();
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert!(bytes[13..].iter().all(|&b| b == 0 || b == 255));

    iscf().args(["infer", "--ckpt"]).arg(run.join("best.ckpt")).arg("--image").arg(dir.path().join("gone.ppm")).arg("--out").arg(&mask).assert().code(2);
}

#[test]
fn gradcheck_exit_codes() {
    iscf().args(["gradcheck", "--scope", "primitives"]).assert().success();
    let out = iscf().args(["gradcheck", "--scope", "primitives", "--inject-fault", "conv2d"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv2d"));
    iscf().args(["gradcheck", "--inject-fault", "nonsense"]).assert().code(1);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    iscf().args(["bench-attn", "--n-list", "16,32", "--d", "8", "--min-time-ms", "0", "--out"]).arg(&csv).assert().success();
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("n,d,variant,wall_ns,bytes_allocated\n"));
    assert_eq!(text.lines().count(), 5);
    // The binary installs the counting allocator.
    assert!(text.lines().skip(1).all(|l| !l.ends_with(",0")));
}
