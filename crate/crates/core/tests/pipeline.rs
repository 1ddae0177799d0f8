use std::path::Path;

use trajcast::config::ExperimentConfig;
use trajcast::env::EnvId;
use trajcast::pipeline::{paths, run_pipeline, Pipeline, Stage, MODELS};
use trajcast::report;
use trajcast::Error;

fn minimal(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::minimal(EnvId::DroneLite);
    c.output_dir = dir.to_path_buf();
    c
}

fn report_bytes(dir: &Path) -> Vec<Vec<u8>> {
    [report::BRIER_TABLE, report::MMD_TABLE, report::SUMMARY, report::DIGEST]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn smoke_run_emits_reports_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = run_pipeline(minimal(a.path())).unwrap();
    run_pipeline(minimal(b.path())).unwrap();
    assert_eq!(report_bytes(a.path()), report_bytes(b.path()));
    assert_eq!(manifest.stages.len(), Stage::ALL.len());
    for rel in manifest.artifact_paths() {
        assert!(a.path().join(rel).is_file(), "{rel}");
    }

    let table = std::fs::read_to_string(a.path().join(report::BRIER_TABLE)).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], format!("level,{}", MODELS.join(",")));
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("low,") && rows[2].starts_with("high,"));
    let mmd = std::fs::read_to_string(a.path().join(report::MMD_TABLE)).unwrap();
    assert_eq!(mmd.lines().next().unwrap().split(',').count(), 1 + 3 * 2);
}

#[test]
fn resume_rebuilds_deleted_artifacts_identically() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(minimal(dir.path())).unwrap();
    let before = report_bytes(dir.path());
    let stats = dir
        .path()
        .join(paths::forecast_stats(trajcast::pipeline::Level::High, "prob-mlp"));
    let stats_before = std::fs::read(&stats).unwrap();
    std::fs::remove_file(&stats).unwrap();
    std::fs::remove_dir_all(dir.path().join("report")).unwrap();

    let mut p = Pipeline::open(minimal(dir.path())).unwrap();
    assert!(p.is_complete(Stage::TrainBaselines));
    assert!(!p.is_complete(Stage::Forecast));
    p.run_all().unwrap();
    assert_eq!(std::fs::read(&stats).unwrap(), stats_before);
    assert_eq!(report_bytes(dir.path()), before);
}

#[test]
fn missing_upstream_artifact_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(minimal(dir.path())).unwrap();
    match p.run_stage(Stage::TrainAleatoric) {
        Err(Error::MissingArtifact(msg)) => assert!(msg.contains("train_low.jsonl"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn five_fold_data_ratio_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = minimal(dir.path());
    c.data.n_train_low_epistemic = 5 * c.data.n_train_high_epistemic;
    match run_pipeline(c) {
        Err(Error::Config(v)) => assert!(v.iter().any(|m| m.contains("10x")), "{v:?}"),
        other => panic!("{other:?}"),
    }
}
