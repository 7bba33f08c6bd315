use std::fs;
use std::path::Path;
use std::process::Command;

use buds::config::PipelineConfig;
use buds::error::BudsError;
use buds::pipeline::{arm_dir, read_metrics, run_stage, Stage, METRICS_CSV, SEGMENTS_FILE, SKILLS_FILE};

const TINY: &str = r#"{
    "preset": "single-task",
    "demos": {"groups": [{"task": "kitchen", "variants": [1], "count": 4}]},
    "repr": {"epochs": 3},
    "hbc": {"epochs": 2, "meta_epochs": 2},
    "eval": {"trials": 4, "max_steps": 60}
}"#;

fn tiny(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_json(TINY).unwrap();
    cfg.paths.demo_dir = root.join("demos");
    cfg.paths.artifact_dir = root.join("artifacts");
    cfg
}

fn buds(args: &[&str], config: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_buds"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

#[test]
fn cluster_without_segments_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(Stage::GenDemos, &cfg).unwrap();
    run_stage(Stage::Repr, &cfg).unwrap();
    match run_stage(Stage::Cluster, &cfg) {
        Err(BudsError::StageDependency { artifact, stage }) => {
            assert_eq!(artifact, SEGMENTS_FILE);
            assert_eq!(stage, "segment");
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn segment_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for stage in [Stage::GenDemos, Stage::Repr, Stage::Segment] {
        run_stage(stage, &cfg).unwrap();
    }
    let path = arm_dir(&cfg, 0, "main").join(SEGMENTS_FILE);
    let first = fs::read(&path).unwrap();
    run_stage(Stage::Segment, &cfg).unwrap();
    assert_eq!(first, fs::read(&path).unwrap());
}

#[test]
fn all_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(Stage::All, &cfg).unwrap();
    let arm = arm_dir(&cfg, 0, "main");
    for file in [
        "repr.json",
        SEGMENTS_FILE,
        SKILLS_FILE,
        "skill_0.json",
        "meta_kitchen.json",
        "rollouts.json",
    ] {
        assert!(arm.join(file).is_file(), "{file} missing");
    }
    assert!(cfg.paths.artifact_dir.join(METRICS_CSV).is_file());
    let metrics = read_metrics(&cfg).unwrap();
    let success = metrics.get("main/success/kitchen/v1").unwrap();
    assert!((0.0..=1.0).contains(&success.value));
    assert!(metrics.get("main/nmi").is_some());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = buds(&["eval"], &dir.path().join("absent.json"));
    assert_eq!(missing.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"preset": "single-task", "hbc": {"meta_period": 0}}"#).unwrap();
    let out = buds(&["train-meta"], &bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hbc.meta_period"));

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"preset": "single-task", "seg": {"leaf_width": 4}}"#).unwrap();
    let out = buds(&["segment"], &unknown);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seg"));

    let good = dir.path().join("good.json");
    fs::write(&good, TINY).unwrap();
    let out = buds(&["cluster"], &good);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `gen-demos` first"));

    let out = buds(&["all", "--threads", "1", "--seed", "3"], &good);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("artifacts/seed-3/main/rollouts.json").is_file());
}
