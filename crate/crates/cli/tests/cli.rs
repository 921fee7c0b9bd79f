use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use xct_core::evaluation::AblationConfig;
use xct_core::projection::project_mean;
use xct_core::training::TrainConfig;
use xct_core::volume::{load_volume, load_xray};
use xct_core::Plane;

fn xct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("XCT_THREADS")
        .output()
        .expect("spawn xct")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

fn tiny_train_config(side: usize) -> TrainConfig {
    let mut c = TrainConfig::with_side(side);
    c.generator.widths = vec![4, 8];
    c.generator.out_width = 2;
    c.discriminator.widths = vec![4, 8];
    c.pretrain_epochs = 2;
    c.finetune_epochs = 1;
    c.batch_size = 2;
    c.validation_fraction = 0.25;
    c
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn phantom_writes_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&xct(&["phantom", "--n", "10", "--side", "32", "--seed", "7", "--out", s(d)]));
    }
    assert_eq!(files_with_ext(&a, "vol").len(), 10);
    assert_eq!(files_with_ext(&a, "xry").len(), 10);
    assert!(a.join("manifest.json").is_file());
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn bad_class_mix_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = xct(&["phantom", "--n", "4", "--class-mix", "0.5,0.6", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("class mix must sum to 1"));
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "3", "--side", "16", "--out", s(&d)]));
    let again = xct(&["phantom", "--n", "3", "--side", "16", "--out", s(&d)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&xct(&["phantom", "--n", "3", "--side", "16", "--out", s(&d), "--force"]));
}

#[test]
fn default_configs_print_in_full() {
    let out = xct(&["--print-default-config"]);
    ok(&out);
    let cfg: TrainConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg, TrainConfig::default());
    let out = xct(&["--print-default-config", "ablation"]);
    ok(&out);
    let cfg: AblationConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg, AblationConfig::default());
}

#[test]
fn drr_matches_coronal_mean_projection() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "3", "--side", "16", "--seed", "5", "--out", s(&d)]));
    let vol = &files_with_ext(&d, "vol")[1];
    let x = tmp.path().join("x.xry");
    ok(&xct(&["drr", "--in", s(vol), "--out", s(&x)]));
    assert_eq!(load_xray(&x).unwrap(), project_mean(&load_volume(vol).unwrap(), Plane::Coronal));
}

#[test]
fn corrupt_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "1", "--side", "16", "--out", s(&d)]));
    let vol = &files_with_ext(&d, "vol")[0];
    let bytes = fs::read(vol).unwrap();
    fs::write(vol, &bytes[..bytes.len() / 2]).unwrap();
    let out = xct(&["drr", "--in", s(vol), "--out", s(&tmp.path().join("x.xry"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = xct(&["drr", "--in", s(&tmp.path().join("missing.vol")), "--out", "x.xry"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn export_writes_one_pgm_per_slice() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "1", "--side", "16", "--out", s(&d)]));
    let e = tmp.path().join("e");
    ok(&xct(&["export", "--in", s(&files_with_ext(&d, "vol")[0]), "--plane", "axial", "--out", s(&e)]));
    assert_eq!(files_with_ext(&e, "pgm").len(), 16);
    assert!(e.join("manifest.json").is_file());
}

#[test]
fn train_run_directory_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "8", "--side", "16", "--seed", "1", "--out", s(&d)]));
    let c = tmp.path().join("c.json");
    write_json(&c, &tiny_train_config(16));
    let r = tmp.path().join("r");
    ok(&xct(&["train", "--config", s(&c), "--data", s(&d), "--out", s(&r)]));

    let ckpts: Vec<String> = fs::read_dir(&r)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("ckpt_epoch_") && n.ends_with(".ckpt"))
        .collect();
    assert!(!ckpts.is_empty());
    assert!(r.join("train_log.ndjson").is_file());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(r.join("manifest.json")).unwrap()).unwrap();
    let stored = fs::read(r.join("config.json")).unwrap();
    assert_eq!(manifest["config_sha256"], hex::encode(Sha256::digest(&stored)));
    let stored: TrainConfig = serde_json::from_slice(&stored).unwrap();
    assert_eq!(stored, tiny_train_config(16));
    assert_eq!(manifest["datasets"][0]["manifest"]["master_seed"], 1);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o == "train_log.ndjson"));

    let again = xct(&["train", "--config", s(&c), "--data", s(&d), "--out", s(&r)]);
    assert_eq!(again.status.code(), Some(2));

    // a second run from the same config reproduces the checkpoint bytes
    let r2 = tmp.path().join("r2");
    ok(&xct(&["train", "--config", s(&c), "--data", s(&d), "--out", s(&r2)]));
    for name in &ckpts {
        assert_eq!(fs::read(r.join(name)).unwrap(), fs::read(r2.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_side_mismatch_and_unknown_fields_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "4", "--side", "16", "--out", s(&d)]));
    let c = tmp.path().join("c.json");
    write_json(&c, &tiny_train_config(32));
    let out = xct(&["train", "--config", s(&c), "--data", s(&d), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(&c, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = xct(&["train", "--config", s(&c), "--data", s(&d), "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_numerical_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&xct(&["phantom", "--n", "8", "--side", "16", "--out", s(&d)]));
    let mut cfg = tiny_train_config(16);
    cfg.lr_g = 1e30;
    cfg.lr_d = 1e30;
    let c = tmp.path().join("c.json");
    write_json(&c, &cfg);
    let out = xct(&["train", "--config", s(&c), "--data", s(&d), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn finetune_eval_and_ablate_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&xct(&["phantom", "--n", "12", "--side", "16", "--seed", "1", "--out", s(&p("paired"))]));
    ok(&xct(&["phantom", "--n", "6", "--side", "16", "--seed", "2", "--unpaired", "--out", s(&p("unpaired"))]));
    ok(&xct(&[
        "phantom", "--n", "6", "--side", "16", "--seed", "3", "--shift", "1.4,1.1,0.02,0", "--out", s(&p("test")),
    ]));

    let mut acfg = AblationConfig {
        base: tiny_train_config(16),
        ..AblationConfig::default()
    };
    acfg.base.pretrain_epochs = 1;
    acfg.classifier.model.side = 16;
    acfg.classifier.model.widths = vec![2, 2, 2, 2];
    acfg.classifier.model.hidden = 8;
    acfg.classifier.epochs = 1;
    acfg.classifier.validation_fraction = 0.0;
    write_json(&p("train.json"), &acfg.base);
    write_json(&p("clf.json"), &acfg.classifier);
    write_json(&p("ablate.json"), &acfg);

    ok(&xct(&["train", "--config", s(&p("train.json")), "--data", s(&p("paired")), "--out", s(&p("pre"))]));
    ok(&xct(&[
        "finetune",
        "--data",
        s(&p("paired")),
        "--unpaired",
        s(&p("unpaired")),
        "--start",
        s(&p("pre").join("best.ckpt")),
        "--out",
        s(&p("ft")),
    ]));
    assert!(!files_with_ext(&p("ft"), "ckpt").is_empty());

    ok(&xct(&[
        "eval",
        "--checkpoint",
        s(&p("ft").join("best.ckpt")),
        "--test",
        s(&p("test")),
        "--classifier-data",
        s(&p("paired")),
        "--classifier-config",
        s(&p("clf.json")),
        "--out",
        s(&p("ev")),
    ]));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(p("ev").join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["reconstruction"]["count"], 6);
    assert_eq!(metrics["oracle"]["hidden_volume_mse"], 0.0);

    let bad = Command::new(env!("CARGO_BIN_EXE_xct"))
        .args(["ablate", "--config", s(&p("ablate.json")), "--data", s(&p("paired"))])
        .args(["--unpaired", s(&p("unpaired")), "--test", s(&p("test")), "--out", s(&p("ab0"))])
        .env("XCT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));

    ok(&xct(&[
        "ablate",
        "--config",
        s(&p("ablate.json")),
        "--data",
        s(&p("paired")),
        "--unpaired",
        s(&p("unpaired")),
        "--test",
        s(&p("test")),
        "--lambda4",
        "0,10",
        "--seeds",
        "3",
        "--out",
        s(&p("ab")),
    ]));
    let result: serde_json::Value = serde_json::from_slice(&fs::read(p("ab").join("ablation.json")).unwrap()).unwrap();
    let rows = result["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["lambda4"], 10.0);
    assert!(rows.iter().all(|r| r["runs"].as_array().unwrap().len() == 3));
    assert_eq!(result["seeds"], serde_json::json!([0, 1, 2]));
    assert!(p("ab").join("ablation.txt").is_file());
    assert!(p("ab").join("manifest.json").is_file());
}
