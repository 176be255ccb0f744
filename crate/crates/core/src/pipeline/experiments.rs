use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::{run_full, RunRecord, RunStatus, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::eval::{RepresentationSelector, Task};
use crate::masking::MaskStrategy;

/// A plain result table. `notes` become leading `# ` lines of the TSV form.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub notes: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            notes: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        let _ = writeln!(out, "{}", self.columns.join("\t"));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join("\t"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j].as_str()).collect())
    }
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Selector a single-number row reports: `cs1` when evaluated, else the first one.
fn headline(cfg: &ExperimentConfig) -> RepresentationSelector {
    if cfg.eval.selectors.contains(&RepresentationSelector::Cs1) {
        RepresentationSelector::Cs1
    } else {
        cfg.eval.selectors[0]
    }
}

fn metric_cells(record: &RunRecord, selector: RepresentationSelector) -> Vec<String> {
    let get = |task, metric| {
        record
            .metric(task, selector, metric)
            .map_or_else(String::new, |r| format!("{:.6}", r.mean))
    };
    let std = record
        .metric(Task::Classification, selector, "acc")
        .map_or_else(String::new, |r| format!("{:.6}", r.std));
    vec![
        get(Task::Classification, "acc"),
        std,
        get(Task::Clustering, "acc"),
        get(Task::Clustering, "nmi"),
    ]
}

const METRIC_COLUMNS: [&str; 4] = ["cls_acc", "cls_acc_std", "clu_acc", "clu_nmi"];

fn status_cell(record: &RunRecord) -> String {
    match &record.status {
        RunStatus::Completed => "ok".into(),
        RunStatus::Running => "running".into(),
        RunStatus::Failed { stage, .. } => format!("failed:{stage}"),
    }
}

fn run_cell(record: &RunRecord) -> String {
    record
        .run_dir
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

/// Directory holding one experiment's runs, its table and its base config.
fn experiment_dir(base: &ExperimentConfig, kind: &str) -> Result<PathBuf> {
    let dir = base
        .out_root()
        .join(format!("{}-{kind}-{}", base.name, &base.hash()?[..12]));
    std::fs::create_dir_all(&dir)?;
    base.save(&dir.join(CONFIG_FILE))?;
    Ok(dir)
}

fn child(base: &ExperimentConfig, dir: &Path, suffix: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("{}-{suffix}", base.name),
        out_dir: Some(dir.to_path_buf()),
        ..base.clone()
    }
}

fn finish(table: Table, dir: &Path, file: &str, records: Vec<RunRecord>) -> Result<(Table, Vec<RunRecord>)> {
    table.write(&dir.join(file))?;
    Ok((table, records))
}

/// One full run per mask ratio; classification accuracy of the headline selector.
pub fn sweep_mask_ratio(base: &ExperimentConfig, ratios: &[f64]) -> Result<(Table, Vec<RunRecord>)> {
    base.validate()?;
    if ratios.is_empty() {
        return Err(Error::invalid("no mask ratios given"));
    }
    let dir = experiment_dir(base, "sweep-mask")?;
    let sel = headline(base);
    let mut table = Table::new(&[&["ratio", "selector"][..], &METRIC_COLUMNS, &["status", "run"]].concat());
    table.notes.push(format!("base_config_hash={}", base.hash()?));
    table.notes.push(format!("ratios={}", list(ratios)));
    let mut records = Vec::new();
    for (k, &ratio) in ratios.iter().enumerate() {
        let mut cfg = child(base, &dir, &format!("mask{k}"));
        cfg.mask.ratio = ratio;
        let record = run_full(&cfg)?;
        let mut row = vec![ratio.to_string(), sel.to_string()];
        row.extend(metric_cells(&record, sel));
        row.extend([status_cell(&record), run_cell(&record)]);
        table.rows.push(row);
        records.push(record);
    }
    finish(table, &dir, "mask_ratio.tsv", records)
}

/// Full runs over the `d_c × d_s` grid; clustering accuracy per cell.
pub fn sweep_dims(
    base: &ExperimentConfig,
    dc_list: &[usize],
    ds_list: &[usize],
) -> Result<(Table, Vec<RunRecord>)> {
    base.validate()?;
    if dc_list.is_empty() || ds_list.is_empty() {
        return Err(Error::invalid("dimension lists must be non-empty"));
    }
    let dir = experiment_dir(base, "sweep-dims")?;
    let sel = headline(base);
    let mut table = Table::new(&[&["d_c", "d_s", "selector"][..], &METRIC_COLUMNS, &["status", "run"]].concat());
    table.notes.push(format!("base_config_hash={}", base.hash()?));
    table.notes.push(format!("dc_list={}", list(dc_list)));
    table.notes.push(format!("ds_list={}", list(ds_list)));
    let mut records = Vec::new();
    for &dc in dc_list {
        for &ds in ds_list {
            let mut cfg = child(base, &dir, &format!("dc{dc}-ds{ds}"));
            cfg.model.d_c = dc;
            cfg.model.d_s = ds;
            let record = run_full(&cfg)?;
            let mut row = vec![dc.to_string(), ds.to_string(), sel.to_string()];
            row.extend(metric_cells(&record, sel));
            row.extend([status_cell(&record), run_cell(&record)]);
            table.rows.push(row);
            records.push(record);
        }
    }
    finish(table, &dir, "dims.tsv", records)
}

/// Component ablation rows: full, only-stage-I (same run, evaluated on `c`),
/// only-stage-II (random frozen consistent encoder), w/o-MCP (ratio 0), w/o-L_d
/// (λ_d = 0) and w/o-L_r (λ_r = 0).
pub fn ablate_components(base: &ExperimentConfig) -> Result<(Table, Vec<RunRecord>)> {
    base.validate()?;
    let mut base = base.clone();
    for sel in [RepresentationSelector::C, RepresentationSelector::Cs1] {
        if !base.eval.selectors.contains(&sel) {
            base.eval.selectors.push(sel);
        }
    }
    let dir = experiment_dir(&base, "ablate-components")?;
    let mut table = Table::new(&[&["variant", "selector"][..], &METRIC_COLUMNS, &["status", "run"]].concat());
    table.notes.push(format!("base_config_hash={}", base.hash()?));
    let variants: [(&str, fn(&mut ExperimentConfig)); 5] = [
        ("full", |_| {}),
        ("only-stage-II", |c| c.stage1.enabled = false),
        ("w/o-MCP", |c| c.mask.ratio = 0.0),
        ("w/o-L_d", |c| c.stage2.lambda_d = 0.0),
        ("w/o-L_r", |c| c.stage2.lambda_r = 0.0),
    ];
    let mut records = Vec::new();
    for (name, edit) in variants {
        let mut cfg = child(&base, &dir, &name.replace('/', ""));
        edit(&mut cfg);
        let record = run_full(&cfg)?;
        let mut rows = vec![(name, RepresentationSelector::Cs1)];
        if name == "full" {
            rows.push(("only-stage-I", RepresentationSelector::C));
        }
        for (label, sel) in rows {
            let mut row = vec![label.to_string(), sel.to_string()];
            row.extend(metric_cells(&record, sel));
            row.extend([status_cell(&record), run_cell(&record)]);
            table.rows.push(row);
        }
        records.push(record);
    }
    finish(table, &dir, "components.tsv", records)
}

/// Random, block and grid masking at ratio 0.7.
pub fn ablate_mask_strategy(base: &ExperimentConfig) -> Result<(Table, Vec<RunRecord>)> {
    base.validate()?;
    let dir = experiment_dir(base, "ablate-strategy")?;
    let sel = headline(base);
    let mut table = Table::new(&[&["strategy", "selector"][..], &METRIC_COLUMNS, &["status", "run"]].concat());
    table.notes.push(format!("base_config_hash={}", base.hash()?));
    let mut records = Vec::new();
    for strategy in [MaskStrategy::Random, MaskStrategy::Block, MaskStrategy::Grid] {
        let mut cfg = child(base, &dir, &strategy.to_string());
        cfg.mask.strategy = strategy;
        cfg.mask.ratio = 0.7;
        let record = run_full(&cfg)?;
        let mut row = vec![strategy.to_string(), sel.to_string()];
        row.extend(metric_cells(&record, sel));
        row.extend([status_cell(&record), run_cell(&record)]);
        table.rows.push(row);
        records.push(record);
    }
    finish(table, &dir, "strategy.tsv", records)
}

/// One row per metric of each run directory, plus its MI audit mean.
pub fn collect_report(run_dirs: &[PathBuf]) -> Result<Table> {
    let mut table = Table::new(&[
        "run", "config_hash", "status", "task", "selector", "metric", "mean", "std", "variance", "mean_mi",
    ]);
    for dir in run_dirs {
        let record = RunRecord::load(dir)?;
        let mi = record.mean_mi.map_or_else(String::new, |m| format!("{m:.6}"));
        let prefix = [run_cell(&record), record.config_hash.clone(), status_cell(&record)];
        if record.metrics.is_empty() {
            let mut row = prefix.to_vec();
            row.extend(["", "", "", "", "", ""].map(String::from));
            row.push(mi);
            table.rows.push(row);
            continue;
        }
        for m in &record.metrics {
            let mut row = prefix.to_vec();
            row.extend([
                m.task.to_string(),
                m.selector.to_string(),
                m.metric.clone(),
                format!("{:.6}", m.mean),
                format!("{:.6}", m.std),
                format!("{:.6e}", m.variance),
                mi.clone(),
            ]);
            table.rows.push(row);
        }
    }
    Ok(table)
}
