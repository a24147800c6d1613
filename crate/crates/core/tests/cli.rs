use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_ncdl");

fn ncdl(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("NCDL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) {
    let out = ncdl(args, dir);
    assert!(
        out.status.success(),
        "ncdl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small enough that the whole pipeline runs in about a second.
fn quick_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 3,
        "synth": {"seed": 3, "samples_first_class": 40, "num_novel": 4},
        "bootstrap": {"epochs": 3},
        "discovery": {
            "total_iters": 40, "ramp_iters": 10, "warmup_iters": 5,
            "batch_images": 4, "proposals_per_image": 8, "memory_batches": 2,
            "projector_hidden": [16], "projector_dim": 8, "num_novel": 4,
            "checkpoint_every": 20
        }
    });
    let p = dir.join("quick.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn pipeline(dir: &Path, cfg: &str) {
    ok(&["synth", "--config", cfg, "--out", "s"], dir);
    ok(&["bootstrap", "--config", cfg, "--out", "b", "--dataset", "s/dataset"], dir);
    ok(
        &["discover", "--config", cfg, "--out", "d", "--dataset", "s/dataset", "--checkpoint", "b/checkpoint"],
        dir,
    );
}

#[test]
fn synth_writes_a_valid_reproducible_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["synth", "--out", "a"], dir);
    ok(&["synth", "--out", "b"], dir);
    let ds = ncdl::dataio::read_dataset(&dir.join("a/dataset")).unwrap();
    assert!(!ds.is_empty());
    assert!(ncdl::data::validate_dataset(&ds).is_empty());
    for f in ["features_view1.bin", "features_view2.bin", "proposals.jsonl"] {
        assert_eq!(
            fs::read(dir.join("a/dataset").join(f)).unwrap(),
            fs::read(dir.join("b/dataset").join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert!(dir.join("a/ground_truth.json").exists());
    assert!(dir.join("a/true_labels.json").exists());
    // Config echo.
    assert_eq!(read(&dir.join("a/config.json"))["synth"]["decay"], json!(0.8));
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = quick_config(dir);
    let out = Command::new(BIN)
        .args(["synth", "--config", cfg.to_str().unwrap(), "--out", "e"])
        .current_dir(dir)
        .env("NCDL_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    let echo = read(&dir.join("e/config.json"));
    assert_eq!((echo["seed"].clone(), echo["synth"]["seed"].clone()), (json!(11), json!(11)));
}

#[test]
fn invalid_decay_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.json"), r#"{"synth": {"decay": 1.5}}"#).unwrap();
    let out = ncdl(&["synth", "--config", "bad.json", "--out", "x"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.decay"));
    assert!(!dir.join("x/dataset").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.json"), r#"{"discovery": {"alhpa": 1}}"#).unwrap();
    let out = ncdl(&["synth", "--config", "bad.json"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = quick_config(dir);
    let cfg = cfg.to_str().unwrap();
    pipeline(dir, cfg);
    assert!(read(&dir.join("b/bootstrap.json"))["train_accuracy"].as_f64().unwrap() > 0.5);
    let log = fs::read_to_string(dir.join("d/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 40);
    assert!(dir.join("d/checkpoints/iter_0000020/tensors.bin").exists());
    assert!(dir.join("d/checkpoints/iter_0000040/tensors.bin").exists());

    let common = ["--config", cfg, "--dataset", "s/dataset", "--checkpoint", "d/checkpoint"];
    let mut args = vec!["map", "--out", "m", "--gt", "s/ground_truth.json"];
    args.extend(common);
    ok(&args, dir);
    let mut args = vec!["evaluate", "--out", "e", "--gt", "s/ground_truth.json", "--mapping", "m/mapping.json"];
    args.extend(common);
    ok(&args, dir);
    let report = read(&dir.join("e/map_report.json"));
    let all = report["map"]["all"]["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&all));

    let mut args = vec!["infer", "--out", "i", "--mapping", "m/mapping.json"];
    args.extend(common);
    ok(&args, dir);
    ok(&args, dir);
    assert!(!read(&dir.join("i/detections.json")).as_object().unwrap().is_empty());

    // Tiny datasets sharing the trained classes.
    let full = ncdl::dataio::read_dataset(&dir.join("s/dataset")).unwrap();
    let empty = ncdl::data::FeatureDataset::empty(full.known_class_names.clone(), full.feature_dim());
    ncdl::dataio::write_dataset(&empty, &dir.join("empty")).unwrap();
    let mut one = empty.clone();
    one.proposals.push(full.proposals[0].clone());
    one.view1 = full.view1.slice(ndarray::s![0..1, ..]).to_owned();
    one.view2 = full.view2.slice(ndarray::s![0..1, ..]).to_owned();
    ncdl::dataio::write_dataset(&one, &dir.join("one")).unwrap();

    for (name, ds) in [("empty", "empty"), ("one", "one")] {
        ok(
            &["infer", "--config", cfg, "--out", name, "--dataset", ds, "--checkpoint", "d/checkpoint", "--mapping", "m/mapping.json"],
            dir,
        );
    }
    assert_eq!(read(&dir.join("empty/detections.json")), json!({}));
    let dets = read(&dir.join("one/detections.json"));
    let mapped = read(&dir.join("m/mapping.json"))["mapping"]["slots"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| !s.is_null())
        .count();
    let per_image = dets.as_object().unwrap();
    assert!(per_image.len() <= 1);
    if let Some(list) = per_image.values().next() {
        let list = list.as_array().unwrap();
        assert!(list.len() <= mapped);
        let mut classes: Vec<&str> = list.iter().map(|d| d["class_name"].as_str().unwrap()).collect();
        classes.sort();
        classes.dedup();
        assert_eq!(classes.len(), list.len(), "one proposal yields at most one detection per class");
    }
}

fn write_report(dir: &Path, name: &str, all_map: f64) -> String {
    let metrics = |m: f64| json!({"mAP": m, "mAP50": m, "mAP75": null, "mAP_s": null, "mAP_m": m, "mAP_l": null, "per_class": {}});
    let report = json!({
        "map": {"known": metrics(0.5), "novel": metrics(all_map / 2.0), "all": metrics(all_map)},
        "mapping": {"num_known": 0, "slots": []},
        "skipped": 0
    });
    fs::create_dir_all(dir.join(name)).unwrap();
    let p = format!("{name}/map_report.json");
    fs::write(dir.join(&p), report.to_string()).unwrap();
    p
}

#[test]
fn report_single_is_identity_and_two_give_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let base = write_report(dir, "base", 0.4);
    let other = write_report(dir, "nomem", 0.3);

    ok(&["report", "--out", "r1", &base], dir);
    let one = read(&dir.join("r1/report.json"));
    let row = one["rows"].as_array().unwrap().iter().find(|r| r["metric"] == "all.mAP").unwrap();
    assert_eq!(row["values"], json!([0.4]));
    assert_eq!(row["deltas"], json!([0.0]));

    ok(&["report", "--out", "r2", &base, &other], dir);
    let two = read(&dir.join("r2/report.json"));
    assert_eq!(two["columns"], json!(["base", "nomem"]));
    let row = two["rows"].as_array().unwrap().iter().find(|r| r["metric"] == "all.mAP").unwrap();
    let d = row["deltas"][1].as_f64().unwrap();
    assert!((d + 0.1).abs() < 1e-12);
    let row = two["rows"].as_array().unwrap().iter().find(|r| r["metric"] == "all.mAP75").unwrap();
    assert_eq!(row["deltas"], json!([null, null]));
    let text = fs::read_to_string(dir.join("r2/report.txt")).unwrap();
    assert!(text.contains("nomem") && text.contains("-0.1000"));
}

#[test]
fn report_missing_file_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let base = write_report(dir, "base", 0.4);
    let out = ncdl(&["report", "--out", "r", &base, "nope/map_report.json"], dir);
    assert!(!out.status.success());
    assert!(!dir.join("r/report.json").exists());
}

#[test]
fn discover_refuses_a_discovery_checkpoint_as_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = quick_config(dir);
    let cfg = cfg.to_str().unwrap();
    pipeline(dir, cfg);
    let out = ncdl(
        &["discover", "--config", cfg, "--out", "d2", "--dataset", "s/dataset", "--checkpoint", "d/checkpoint"],
        dir,
    );
    assert!(!out.status.success());
}

#[test]
fn discover_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = quick_config(dir);
    let cfg = cfg.to_str().unwrap();
    pipeline(dir, cfg);
    ok(
        &["discover", "--config", cfg, "--out", "d2", "--dataset", "s/dataset", "--checkpoint", "b/checkpoint"],
        dir,
    );
    for f in ["checkpoint/tensors.bin", "checkpoint/checkpoint.json", "train_log.jsonl"] {
        assert_eq!(fs::read(dir.join("d").join(f)).unwrap(), fs::read(dir.join("d2").join(f)).unwrap(), "{f}");
    }
}
