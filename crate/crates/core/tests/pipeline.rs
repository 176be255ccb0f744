use std::path::Path;

use mrdd_core::eval::{RepresentationSelector, Task};
use mrdd_core::pipeline::{
    ablate_components, ablate_mask_strategy, collect_report, run_full, sweep_dims, sweep_mask_ratio,
    ExperimentConfig, RunRecord, RunStatus,
};

fn toy(out: &Path) -> ExperimentConfig {
    let text = r#"
name = "toy"
seed = 11

[data]
recipe = "emnist-edge"
n_samples = 64
size = 32

[stage1]
epochs = 2
batch_size = 16

[stage2]
epochs = 2
batch_size = 16

[audit.mine]
batch_size = 16
epochs = 2
repeats = 2
hidden = [16, 16]
"#;
    let mut cfg = ExperimentConfig::from_toml_str(text).unwrap();
    cfg.out_dir = Some(out.to_path_buf());
    cfg
}

#[test]
fn toy_run_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path());
    let record = run_full(&cfg).unwrap();
    assert_eq!(record.status, RunStatus::Completed, "{:?}", record.status);
    for key in ["config", "dataset", "stage1", "stage1_curve", "stage2", "stage2_curve", "latents", "metrics", "audit"] {
        assert!(record.artifacts.contains_key(key), "missing {key}");
    }
    record.verify().unwrap();
    assert_eq!(record.config_hash, cfg.hash().unwrap());
    assert!(record.run_dir.to_string_lossy().contains(&record.config_hash[..12]));
    assert_eq!(record.stage1_curve.len(), 2);
    assert_eq!(record.stage2_curve.len(), 2);
    assert_eq!(record.encoder_hash_before, record.encoder_hash_after);
    for sel in [RepresentationSelector::C, RepresentationSelector::Cs1] {
        for (task, metric) in [(Task::Clustering, "acc"), (Task::Clustering, "nmi"), (Task::Classification, "acc"), (Task::Classification, "f")] {
            let r = record.metric(task, sel, metric).unwrap();
            assert_eq!(r.runs.len(), 10);
            assert!(r.is_consistent());
            assert!(r.runs.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert_eq!(record.audit.len(), 2);
    let reloaded = RunRecord::load(&record.run_dir).unwrap();
    assert_eq!(reloaded, record);
    let metrics = std::fs::read_to_string(record.run_dir.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with(&format!("# config_hash={}", record.config_hash)));
}

#[test]
fn identical_configs_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_full(&toy(a.path())).unwrap();
    let rb = run_full(&toy(b.path())).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.audit, rb.audit);
    let read = |r: &RunRecord| std::fs::read(r.run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(read(&ra), read(&rb));
}

#[test]
fn failing_stage_leaves_a_marked_record() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy(tmp.path());
    // a missing dataset directory fails at the data stage
    cfg.data.dir = Some(tmp.path().join("absent"));
    let record = run_full(&cfg).unwrap();
    match &record.status {
        RunStatus::Failed { stage, .. } => assert_eq!(stage, "data"),
        other => panic!("unexpected status {other:?}"),
    }
    assert!(record.run_dir.join("record.json").exists());
    assert!(!record.is_complete());
}

#[test]
fn mask_sweep_echoes_its_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy(tmp.path());
    cfg.audit.enabled = false;
    cfg.eval.runs = 2;
    cfg.stage1.epochs = 1;
    cfg.stage2.epochs = 1;
    let ratios = [0.0, 0.5];
    let (table, records) = sweep_mask_ratio(&cfg, &ratios).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.column("ratio").unwrap(), vec!["0", "0.5"]);
    assert!(records.iter().all(RunRecord::is_complete));
    assert_eq!(records[1].stage1_curve.len(), 1);
    let (grid, grid_records) = sweep_dims(&cfg, &[2, 3], &[4]).unwrap();
    assert_eq!(grid.rows.len(), 2);
    assert!(grid.notes.contains(&"dc_list=2,3".to_string()));
    assert!(grid.notes.contains(&"ds_list=4".to_string()));
    assert_ne!(grid_records[0].run_dir, grid_records[1].run_dir);
}

#[test]
fn ablations_have_the_expected_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy(tmp.path());
    cfg.audit.enabled = false;
    cfg.eval.runs = 2;
    cfg.stage1.epochs = 1;
    cfg.stage2.epochs = 1;
    let (table, records) = ablate_components(&cfg).unwrap();
    assert_eq!(
        table.column("variant").unwrap(),
        vec!["full", "only-stage-I", "only-stage-II", "w/o-MCP", "w/o-L_d", "w/o-L_r"]
    );
    assert!(records[1].stage1_curve.is_empty());
    // λ_d = 0 keeps the CLUB term out of the gradient but still reports it
    assert!(records[3].stage2_curve[0].club.iter().all(|v| v.is_finite()));
    let (table, _) = ablate_mask_strategy(&cfg).unwrap();
    assert_eq!(table.column("strategy").unwrap(), vec!["random", "block", "grid"]);
    let dirs: Vec<_> = records.iter().map(|r| r.run_dir.clone()).collect();
    let report = collect_report(&dirs).unwrap();
    assert_eq!(report.rows.len(), 5 * 2 * 4);
}
