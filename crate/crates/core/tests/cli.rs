use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motion_diffuse::motion::{load_motion, sidecar_path, PositionsFile};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motion-diffuse"));
    c.env_remove("MOTION_DIFFUSE_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "dropout": 0.0, "max_frames": 16, "vocab": 64},
        "schedule": {"steps": 10},
        "train": {"batch_size": 4, "total_steps": 3, "lr": 1e-3},
        "data": {"clip_frames": 16, "clip_stride": 16},
        "extractor": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "d_feat": 16, "vocab": 64},
        "extractor_train": {"steps": 3, "batch_size": 4},
        "eval": {"sl": 2, "mm_texts": 2, "negatives": 3}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

/// Synthetic data, a config and a trained checkpoint in one temp dir.
struct Fixture {
    dir: TempDir,
    cfg: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["make-synthetic", "--out", p(&data), "--classes", "4", "--per-class", "2", "--seed", "1"]);
    let ckpt = dir.path().join("model.ckpt");
    ok(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&ckpt)]);
    Fixture { dir, cfg, data, ckpt }
}

#[test]
fn make_synthetic_writes_every_motion() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    ok(&["make-synthetic", "--out", p(&out), "--classes", "3", "--per-class", "2"]);
    let ann = std::fs::read_to_string(out.join("annotations.jsonl")).unwrap();
    let lines: Vec<Value> = ann.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    let labels: std::collections::BTreeSet<_> = lines.iter().map(|l| l["label"].as_str().unwrap().to_string()).collect();
    assert_eq!(labels.len(), 3);
    for l in &lines {
        let m = load_motion(&out.join(l["motion"].as_str().unwrap())).unwrap();
        assert_eq!(m.dims(), 147);
    }
}

#[test]
fn zero_per_class_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["make-synthetic", "--out", p(&dir.path().join("d")), "--per-class", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("per-class"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = run(&["--config", p(&cfg), "make-synthetic", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn config_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    let out = bin()
        .env("MOTION_DIFFUSE_CONFIG", &cfg)
        .args(["make-synthetic", "--out", p(&dir.path().join("d"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn train_sample_edit_round() {
    let f = fixture();
    let log = std::fs::read_to_string(f.ckpt.with_extension("log.jsonl")).unwrap();
    let entries: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 3);
    for key in ["step", "simple", "vlb", "hybrid", "lr", "grad_norm"] {
        assert!(entries[0].get(key).is_some(), "log lacks {key}");
    }

    // Resuming continues the step count and appends to the log.
    ok(&["--config", p(&f.cfg), "train", "--data", p(&f.data), "--out", p(&f.ckpt), "--steps", "5", "--resume"]);
    let log = std::fs::read_to_string(f.ckpt.with_extension("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let a = f.dir.path().join("a.json");
    let b = f.dir.path().join("b.json");
    for out in [&a, &b] {
        ok(&[
            "sample", "--ckpt", p(&f.ckpt), "--text", "a person walks forward", "--frames", "12", "--steps", "5",
            "--seed", "3", "--out", p(out), "--positions",
        ]);
    }
    let (ma, mb) = (load_motion(&a).unwrap(), load_motion(&b).unwrap());
    assert_eq!(ma.data, mb.data);
    assert_eq!(ma.frames(), 12);
    let pos = PositionsFile::load(&sidecar_path(&a)).unwrap();
    assert_eq!(pos.frames.len(), 12);

    let ddim = f.dir.path().join("ddim.json");
    ok(&[
        "sample", "--ckpt", p(&f.ckpt), "--text", "jump", "--frames", "8", "--method", "ddim", "--guidance", "1",
        "--count", "2", "--jobs", "2", "--out", p(&ddim),
    ]);
    assert!(f.dir.path().join("ddim_0.json").exists() && f.dir.path().join("ddim_1.json").exists());

    let mask = f.dir.path().join("mask.json");
    std::fs::write(&mask, json!({"frames": [[0, 12]]}).to_string()).unwrap();
    let edited = f.dir.path().join("edited.json");
    ok(&["edit", "--ckpt", p(&f.ckpt), "--ref", p(&a), "--mask", p(&mask), "--text", "wave", "--out", p(&edited), "--steps", "4"]);
    assert_eq!(load_motion(&edited).unwrap().data, ma.data);

    let pred = f.dir.path().join("pred.json");
    ok(&["edit", "--ckpt", p(&f.ckpt), "--ref", p(&a), "--text", "wave", "--out", p(&pred), "--predict-after", "4", "--steps", "4"]);
    let mp = load_motion(&pred).unwrap();
    assert_eq!(mp.data.slice(ndarray::s![..4, ..]), ma.data.slice(ndarray::s![..4, ..]));
    assert_ne!(mp.data.slice(ndarray::s![4.., ..]), ma.data.slice(ndarray::s![4.., ..]));
}

#[test]
fn eval_needs_an_extractor_then_reports() {
    let f = fixture();
    let report = f.dir.path().join("report.json");
    let missing = f.dir.path().join("none.json");
    let out = run(&[
        "--config", p(&f.cfg), "eval", "--ckpt", p(&f.ckpt), "--extractor", p(&missing), "--data", p(&f.data),
        "--out", p(&report),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-extractor"));

    let ex = f.dir.path().join("extractor.json");
    ok(&["--config", p(&f.cfg), "train-extractor", "--data", p(&f.data), "--out", p(&ex)]);
    ok(&[
        "--config", p(&f.cfg), "eval", "--ckpt", p(&f.ckpt), "--extractor", p(&ex), "--data", p(&f.data),
        "--out", p(&report), "--steps", "3", "--limit", "8",
    ]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["ape", "ave", "mclip", "fd", "r_precision", "multimodality", "joint_variance"] {
        assert!(r.get(key).is_some(), "report lacks {key}");
    }
    assert!(r["fd"].as_f64().unwrap() >= 0.0);
    let top1 = r["r_precision"]["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(report.with_extension("txt").exists());
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "sample", "--ckpt", p(&dir.path().join("nope.ckpt")), "--text", "x", "--frames", "4", "--out",
        p(&dir.path().join("o.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
