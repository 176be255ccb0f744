//! Configuration, end-to-end runs, sweeps and ablations.

mod config;
mod experiments;
mod run;

pub use config::{
    AuditConfig, DataConfig, EvalConfig, ExperimentConfig, MaskConfig, ModelConfig, Stage1Section,
    Stage2Section, OUT_ENV,
};
pub use experiments::{
    ablate_components, ablate_mask_strategy, collect_report, sweep_dims, sweep_mask_ratio, Table,
};
pub use run::{
    audit, audit_table, consistent_spec, evaluate, load_data, run_full, stage1_table, stage2_table,
    train_consistent, train_specific, RunRecord, RunStatus, CONFIG_FILE, RECORD_FILE,
};
