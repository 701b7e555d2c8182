use std::path::Path;
use std::process::{Command, Output};

fn gnnet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnnet"))
        .args(args)
        .env("GNNET_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const TINY: &[&str] = &[
    "generate",
    "--out",
    "data",
    "--width",
    "32",
    "--height",
    "32",
    "--focal",
    "28",
    "--frames",
    "4",
    "--conditions",
    "2",
    "--train-scenes",
    "1",
    "--val-scenes",
    "1",
    "--test-scenes",
    "1",
    "--pairs-per-scene",
    "2",
    "--positives",
    "8",
    "--negatives",
    "8",
];

const SMALL_NET: &[&str] = &["--descriptor-dim", "4", "--base-width", "4", "--pyramid-levels", "2"];

fn with_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = gnnet(dir.path(), TINY);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn generate_writes_three_splits() {
    let dir = with_data();
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
    for s in ["\"train\"", "\"val\"", "\"test\""] {
        assert!(manifest.contains(s));
    }
    assert!(dir.path().join("data/run.json").exists());
}

#[test]
fn zero_frames_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gnnet(dir.path(), &["generate", "--out", "d", "--frames", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gnnet(dir.path(), &["evaluate", "--bogus"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = gnnet(dir.path(), &["evaluate", "--dataset", "nowhere", "--out", "e", "--methods", "intensity"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn learned_method_without_weights_is_a_data_fault() {
    let dir = with_data();
    let out = gnnet(dir.path(), &["evaluate", "--dataset", "data", "--out", "e", "--methods", "trained"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
}

#[test]
fn intensity_evaluation_needs_no_weights() {
    let dir = with_data();
    let out = gnnet(dir.path(), &["evaluate", "--dataset", "data", "--out", "e", "--methods", "intensity"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("e/curve_intensity.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("threshold,fraction"));
    assert_eq!(csv.lines().count(), 102);
    for f in ["e/curves.csv", "e/curves.svg", "e/summary.json", "e/run.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn train_accepts_reference_learning_rate_and_echoes_config() {
    let dir = with_data();
    let mut args = vec!["train", "--dataset", "data", "--out", "run", "--epochs", "1", "--lr", "1e-6"];
    args.extend_from_slice(SMALL_NET);
    let out = gnnet(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/run.json")).unwrap()).unwrap();
    assert_eq!(run["args"]["lr"].as_f64(), Some(1e-6));
    assert!(run["version"].as_str().unwrap().starts_with("gnnet-v"));
    let log = std::fs::read_to_string(dir.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,total,contrastive,gauss_newton,val_auc"));
    assert_eq!(log.lines().count(), 2);
    for f in ["run/weights.gnnw", "run/last.gnnw"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn default_learning_rate_is_logged_as_deviation() {
    let dir = with_data();
    let mut args = vec!["train", "--dataset", "data", "--out", "run", "--epochs", "1"];
    args.extend_from_slice(SMALL_NET);
    let out = gnnet(dir.path(), &args);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("1e-6"));
}

#[test]
fn align_prints_a_track_result() {
    let dir = with_data();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    let test = manifest["splits"].as_array().unwrap().iter().find(|s| s["name"] == "test").unwrap();
    let cand = test["candidates"][0]["candidate"].as_u64().unwrap().to_string();
    let out = gnnet(dir.path(), &["align", "--dataset", "data", "--candidate", &cand]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["converged"].is_boolean());
    assert_eq!(v["pose"].as_array().unwrap().len(), 16);
}

#[test]
fn align_rejects_a_non_candidate() {
    let dir = with_data();
    let out = gnnet(dir.path(), &["align", "--dataset", "data", "--candidate", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = gnnet(dir.path(), &["gradcheck", "--size", "16", "--pairs", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max rel err"));
    assert!(text.contains("gradcheck passed"));
}

#[test]
fn gradcheck_report_flags_a_tampered_block() {
    let args = gnnet_cli::GradcheckArgs {
        seed: 0,
        size: 16,
        descriptor_dim: 4,
        pyramid_levels: 2,
        base_width: 4,
        pairs: 4,
        step: 1e-5,
        tolerance: 1e-4,
        floor: 1e-6,
    };
    let broken = |_: gnnet_core::pipeline::Objective, name: &str, g: &mut gnnet_core::tensor::Tensor| {
        if name == "enc0.conv1.w" {
            for v in g.data_mut() {
                *v = -*v;
            }
        }
    };
    let report = gnnet_cli::gradcheck_report(&args, Some(&broken)).unwrap();
    assert!(!report.passed());
    assert!(report
        .blocks
        .iter()
        .filter(|b| b.max_rel_error >= 1e-4)
        .all(|b| b.block == "enc0.conv1.w"));
}
