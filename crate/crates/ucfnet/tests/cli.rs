//! End-to-end tests driving the compiled binary: every command, the exit
//! code contract, and the file formats each command leaves behind.

use std::path::Path;
use std::process::{Command, Output};

use ucfnet::optim::cosine_lr;

const BIN: &str = env!("CARGO_BIN_EXE_ucfnet");

fn run(config: Option<&Path>, out_dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.env("UCF_OUTPUT_DIR", out_dir);
    if let Some(cfg) = config {
        cmd.arg("--config").arg(cfg);
    }
    cmd.args(args);
    cmd.output().expect("binary should spawn")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).expect("config should write");
    path
}

/// Small-model config used by the train/eval/predict chain: 32 synthetic
/// 32x32 images, a two-level model, ten epochs.
const SMOKE: &str = r#"{
    "model": {"base_width": 8, "depth": 2, "n_ffc_blocks": 1},
    "optim": {"epochs": 10, "batch_size": 8},
    "data": {"synth": {"count": 32, "size": [32, 32], "seed": 9}},
    "eval": {"thresholds": 21},
    "run": {"checkpoint_every": 4}
}"#;

#[test]
fn synth_is_seed_deterministic_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"data": {"synth": {"count": 6, "size": [32, 32], "seed": 3}}}"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_success(&run(Some(&cfg), &a, &["synth"]), "first synth");
    assert_success(&run(Some(&cfg), &b, &["synth"]), "second synth");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("dataset/manifest.json")).unwrap())
            .expect("manifest should be valid JSON");
    assert_eq!(manifest["count"], 6);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 12, "6 images + 6 masks");

    let ck_a = std::fs::read_to_string(a.join("dataset/checksum.txt")).unwrap();
    let ck_b = std::fs::read_to_string(b.join("dataset/checksum.txt")).unwrap();
    assert_eq!(ck_a, ck_b, "same seed must reproduce the dataset bit for bit");

    let cfg2 = write_config(
        &tmp.path().join("a"),
        r#"{"data": {"synth": {"count": 6, "size": [32, 32], "seed": 4}}}"#,
    );
    let c = tmp.path().join("c");
    assert_success(&run(Some(&cfg2), &c, &["synth"]), "third synth");
    let ck_c = std::fs::read_to_string(c.join("dataset/checksum.txt")).unwrap();
    assert_ne!(ck_a, ck_c, "a different seed must change the checksum");
}

#[test]
fn config_errors_exit_2_and_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    for (body, needle) in [
        (r#"{"optim": {"epochs": 0}}"#, "epochs"),
        (r#"{"bogus": 1}"#, "unknown field"),
        (r#"{"model": {"theta": 2.0}}"#, "theta"),
        (r#"{"data": {"synth": {"count": 0}}}"#, "count"),
    ] {
        let cfg = write_config(tmp.path(), body);
        let out = run(Some(&cfg), &out_dir, &["train"]);
        assert_eq!(out.status.code(), Some(2), "config {body} should exit 2");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(
            stderr.contains(needle),
            "stderr for {body} should mention {needle}, got: {stderr}"
        );
    }

    // Structurally valid config that lacks the section synth requires.
    let cfg = write_config(tmp.path(), r#"{"data": {"dir": "somewhere"}}"#);
    let out = run(Some(&cfg), &out_dir, &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.synth"));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        None,
        tmp.path(),
        &["eval", "--checkpoint", "/nonexistent/ckpt"],
    );
    assert_eq!(out.status.code(), Some(1), "missing checkpoint is a runtime error");
}

#[test]
fn train_eval_predict_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let out_dir = tmp.path().join("run");

    let out = run(Some(&cfg), &out_dir, &["train"]);
    assert_success(&out, "train");
    for name in ["ckpt_best", "ckpt_epoch_0004", "ckpt_epoch_0008", "ckpt_final"] {
        assert!(
            out_dir.join(format!("{name}.manifest.json")).is_file(),
            "{name} should have been written"
        );
    }

    // The epoch log must follow the cosine schedule exactly and end with a
    // model that finds at least part of one target.
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,bce,soft_iou,total,lr,val_iou"),
        "log header"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10, "one row per epoch");
    // 32 images split 0.8 -> 26 train -> ceil(26/8) = 4 steps per epoch.
    let steps = 4;
    for (e, row) in rows.iter().enumerate() {
        assert_eq!(row[0] as usize, e);
        assert_eq!(
            row[4],
            cosine_lr(e * steps, 10 * steps, 1e-3, 1e-5),
            "lr at epoch {e} should match the schedule"
        );
    }
    let final_val_iou = rows.last().unwrap()[5];
    assert!(
        final_val_iou > 0.0,
        "ten smoke epochs should end with positive held-out IoU, got {final_val_iou}"
    );

    let out = run(
        Some(&cfg),
        &out_dir,
        &["eval", "--checkpoint", out_dir.join("ckpt_best").to_str().unwrap()],
    );
    assert_success(&out, "eval");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .expect("report should be valid JSON");
    for key in ["iou", "niou", "pd", "fa", "auc", "f_score", "per_image"] {
        assert!(report.get(key).is_some(), "report should carry {key}");
    }
    // 32 * 0.8 rounds to 26 train, leaving 6 held-out images.
    assert_eq!(report["per_image"].as_array().unwrap().len(), 6);
    let curves = std::fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    assert_eq!(
        curves.lines().count(),
        22,
        "header plus one row per configured threshold"
    );
    assert_eq!(curves.lines().next(), Some("threshold,precision,recall,tpr,fpr"));
    assert_eq!(
        std::fs::read_dir(out_dir.join("preds")).unwrap().count(),
        6,
        "one mask per held-out image"
    );
    assert_eq!(std::fs::read_dir(out_dir.join("probs")).unwrap().count(), 6);

    let image = out_dir.join("dataset/images/synth_0000.png");
    let mask_out = tmp.path().join("mask.png");
    let out = run(
        Some(&cfg),
        &out_dir,
        &[
            "predict",
            "--checkpoint",
            out_dir.join("ckpt_best").to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            mask_out.to_str().unwrap(),
        ],
    );
    assert_success(&out, "predict");
    assert!(mask_out.is_file(), "predicted mask missing");
    assert!(
        tmp.path().join("mask.prob.png").is_file(),
        "probability map missing"
    );
}

#[test]
fn gradcheck_command_passes_and_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(None, tmp.path(), &["gradcheck"]);
    assert_success(&out, "gradcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in ["conv2d", "cdc", "batchnorm", "fourier_unit", "ucf_model"] {
        assert!(stdout.contains(op), "gradcheck table should list {op}");
    }
    assert!(stdout.contains("gradient checks passed"));
}

#[test]
fn ablate_writes_the_four_variant_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{
            "model": {"base_width": 8, "depth": 2, "n_ffc_blocks": 1},
            "optim": {"epochs": 2, "batch_size": 8},
            "data": {"synth": {"count": 12, "size": [32, 32], "seed": 5}},
            "run": {"seeds": [0]}
        }"#,
    );
    let out_dir = tmp.path().join("run");
    assert_success(&run(Some(&cfg), &out_dir, &["ablate"]), "ablate");

    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap())
            .expect("ablation.json should be valid JSON");
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["plain", "cdc", "ffc", "full"]);
    assert_eq!(rows[0]["theta"], 0.0);
    assert_eq!(rows[0]["n_ffc_blocks"], 0);
    assert_eq!(rows[3]["theta"], 0.7);
    assert_eq!(rows[3]["n_ffc_blocks"], 1);
    for row in rows {
        assert_eq!(row["seeds"], serde_json::json!([0]));
        let iou = row["median_iou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&iou), "median IoU {iou} out of range");
    }

    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header plus four variant rows");
    assert_eq!(csv.lines().next(), Some("name,theta,n_ffc_blocks,median_iou"));
}
