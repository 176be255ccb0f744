use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::consistency::{train_stage1, ConsistentModel, ConsistentSpec, Stage1Epoch};
use crate::data::{generate_dataset, load_dataset, MultiViewDataset, Recipe};
use crate::disentangle::{
    extract_latents, train_stage2, Latents, SpecificModel, SpecificSpec, Stage2Epoch,
};
use crate::error::{Error, Result};
use crate::eval::{classify_eval_stored, cluster_eval, report_table, MetricsReport, RepresentationSelector, Task};
use crate::mi_audit::{audit_redundancy, mean_mi, AuditRow};

pub const RECORD_FILE: &str = "record.json";
pub const CONFIG_FILE: &str = "config.toml";

/// The dataset a config points at: loaded from `data.dir`, else generated.
pub fn load_data(cfg: &ExperimentConfig) -> Result<MultiViewDataset> {
    let ds = match &cfg.data.dir {
        Some(dir) => load_dataset(dir)?,
        None => generate_dataset(
            cfg.data.recipe.parse::<Recipe>()?,
            cfg.data.n_samples,
            cfg.data.size,
            cfg.data.split_ratio,
            cfg.data.seed,
        )?,
    };
    if ds.views.iter().any(|v| v.height() != cfg.data.size) {
        return Err(Error::Config(format!(
            "dataset images are not {0}x{0} as data.size says",
            cfg.data.size
        )));
    }
    Ok(ds)
}

pub fn consistent_spec(cfg: &ExperimentConfig, dataset: &MultiViewDataset) -> Result<ConsistentSpec> {
    ConsistentSpec::for_manifest(
        &dataset.manifest,
        cfg.model.base_channels,
        cfg.model.dropout,
        cfg.model.d_c,
        cfg.model.fusion,
    )
}

/// Stage I. With `stage1.enabled = false` the randomly initialized model is frozen
/// untrained.
pub fn train_consistent(
    cfg: &ExperimentConfig,
    dataset: &MultiViewDataset,
    dump_dir: Option<&Path>,
) -> Result<(ConsistentModel, Vec<Stage1Epoch>)> {
    let spec = consistent_spec(cfg, dataset)?;
    let mut model = ConsistentModel::new(&spec, cfg.init_seeds().0, DType::F32)?;
    if !cfg.stage1.enabled {
        model.freeze();
        return Ok((model, Vec::new()));
    }
    let curve = train_stage1(&mut model, dataset, &cfg.stage1_config(), dump_dir)?;
    Ok((model, curve))
}

/// Stage II against a frozen stage-I model.
pub fn train_specific(
    cfg: &ExperimentConfig,
    dataset: &MultiViewDataset,
    consistent: &ConsistentModel,
    dump_dir: Option<&Path>,
) -> Result<(SpecificModel, Vec<Stage2Epoch>)> {
    let spec = SpecificSpec {
        club_hidden: cfg.model.club_hidden.clone(),
        ..SpecificSpec::new(consistent.spec().views.clone(), cfg.model.d_c, cfg.model.d_s)
    };
    let mut model = SpecificModel::new(&spec, cfg.init_seeds().1, DType::F32)?;
    let curve = train_stage2(&mut model, consistent, dataset, &cfg.stage2_config(), dump_dir)?;
    Ok((model, curve))
}

/// Clustering and classification reports for every configured selector.
pub fn evaluate(cfg: &ExperimentConfig, latents: &Latents) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    let seed = cfg.eval_seed();
    for &sel in &cfg.eval.selectors {
        out.extend(cluster_eval(latents, sel, latents.header.n_classes, cfg.eval.runs, seed)?);
    }
    for &sel in &cfg.eval.selectors {
        out.extend(classify_eval_stored(latents, sel, cfg.eval.runs, seed)?);
    }
    Ok(out)
}

pub fn audit(cfg: &ExperimentConfig, latents: &Latents) -> Result<Vec<AuditRow>> {
    audit_redundancy(latents, &cfg.audit.mine, cfg.audit_seed())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { stage: String, error: String },
}

/// Everything a run produced. Artifact paths are relative to `run_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub stage1_curve: Vec<Stage1Epoch>,
    pub stage2_curve: Vec<Stage2Epoch>,
    pub encoder_hash_before: Option<String>,
    pub encoder_hash_after: Option<String>,
    pub metrics: Vec<MetricsReport>,
    pub audit: Vec<AuditRow>,
    pub mean_mi: Option<f64>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn metric(&self, task: Task, selector: RepresentationSelector, metric: &str) -> Option<&MetricsReport> {
        self.metrics
            .iter()
            .find(|r| r.task == task && r.selector == selector && r.metric == metric)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RECORD_FILE);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn save(&self) -> Result<()> {
        std::fs::write(self.run_dir.join(RECORD_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Checks every listed artifact exists and the stored config still hashes to
    /// `config_hash`.
    pub fn verify(&self) -> Result<()> {
        for (name, rel) in &self.artifacts {
            if !self.run_dir.join(rel).exists() {
                return Err(Error::invalid(format!("artifact '{name}' is missing")));
            }
        }
        let stored = ExperimentConfig::load(&self.run_dir.join(CONFIG_FILE))?;
        if stored.hash()? != self.config_hash {
            return Err(Error::invalid("stored config does not hash to the recorded value"));
        }
        Ok(())
    }
}

fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

pub fn stage1_table(hash: &str, curve: &[Stage1Epoch]) -> String {
    let mut out = hash_line(hash);
    let views = curve.first().map_or(0, |e| e.recon.len());
    out.push_str("epoch\tlr\ttotal\tkl");
    for i in 1..=views {
        let _ = write!(out, "\trecon{i}");
    }
    out.push('\n');
    for e in curve {
        let _ = write!(out, "{}\t{:e}\t{:.9e}\t{:.9e}", e.epoch, e.lr, e.total, e.kl);
        for r in &e.recon {
            let _ = write!(out, "\t{r:.9e}");
        }
        out.push('\n');
    }
    out
}

pub fn stage2_table(hash: &str, curve: &[Stage2Epoch]) -> String {
    let mut out = hash_line(hash);
    let views = curve.first().map_or(0, |e| e.recon.len());
    out.push_str("epoch\tlr\ttotal\tqnet_nll");
    for part in ["club", "recon", "kl"] {
        for i in 1..=views {
            let _ = write!(out, "\t{part}{i}");
        }
    }
    out.push('\n');
    for e in curve {
        let _ = write!(out, "{}\t{:e}\t{:.9e}\t{:.9e}", e.epoch, e.lr, e.total, e.qnet_nll);
        for v in e.club.iter().chain(&e.recon).chain(&e.kl) {
            let _ = write!(out, "\t{v:.9e}");
        }
        out.push('\n');
    }
    out
}

pub fn audit_table(hash: &str, rows: &[AuditRow]) -> String {
    let mut out = hash_line(hash);
    out.push_str("view\tmi_nats\tstd\trepeats\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{}", r.view, r.mi_nats, r.std, r.per_repeat.len());
    }
    out
}

struct Runner {
    record: RunRecord,
    started: Instant,
}

impl Runner {
    fn write(&mut self, key: &str, rel: &str, contents: &str) -> Result<()> {
        std::fs::write(self.record.run_dir.join(rel), contents)?;
        self.record.artifacts.insert(key.into(), rel.into());
        Ok(())
    }

    fn finish(mut self, status: RunStatus) -> Result<RunRecord> {
        self.record.status = status;
        self.record.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.record.save()?;
        Ok(self.record)
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> std::result::Result<T, RunStatus> {
    log::info!("stage {name}");
    f().map_err(|e| {
        log::error!("stage {name} failed: {e}");
        RunStatus::Failed {
            stage: name.into(),
            error: e.to_string(),
        }
    })
}

/// Stage I → freeze → stage II → extract → evaluate → MI audit, with every
/// artifact under [`ExperimentConfig::run_dir`].
///
/// Stage failures do not surface as `Err`: the returned record carries a
/// [`RunStatus::Failed`] marker and whatever was produced before the failure.
/// `Err` is reserved for an invalid config or an unwritable run directory.
pub fn run_full(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let run_dir = cfg.run_dir()?;
    std::fs::create_dir_all(&run_dir)?;
    let mut runner = Runner {
        record: RunRecord {
            name: cfg.name.clone(),
            config_hash: hash.clone(),
            run_dir: run_dir.clone(),
            status: RunStatus::Running,
            stage1_curve: Vec::new(),
            stage2_curve: Vec::new(),
            encoder_hash_before: None,
            encoder_hash_after: None,
            metrics: Vec::new(),
            audit: Vec::new(),
            mean_mi: None,
            artifacts: BTreeMap::new(),
            wall_clock_secs: 0.0,
        },
        started: Instant::now(),
    };
    runner.write("config", CONFIG_FILE, &cfg.to_toml()?)?;
    runner.record.save()?;
    let status = match execute(cfg, &hash, &run_dir, &mut runner) {
        Ok(()) => RunStatus::Completed,
        Err(status) => status,
    };
    runner.finish(status)
}

fn execute(cfg: &ExperimentConfig, hash: &str, dir: &Path, runner: &mut Runner) -> std::result::Result<(), RunStatus> {
    let dataset = stage("data", || {
        let ds = load_data(cfg)?;
        runner.write("dataset", "dataset.json", &serde_json::to_string_pretty(&ds.manifest)?)?;
        Ok(ds)
    })?;

    let consistent = stage("stage1", || {
        let (model, curve) = train_consistent(cfg, &dataset, Some(dir))?;
        model.save(&dir.join("stage1.ckpt"))?;
        runner.record.artifacts.insert("stage1".into(), "stage1.ckpt".into());
        runner.write("stage1_curve", "stage1_curve.tsv", &stage1_table(hash, &curve))?;
        runner.record.stage1_curve = curve;
        runner.record.encoder_hash_before = Some(model.encoder_fingerprint()?);
        Ok(model)
    })?;

    let specific = stage("stage2", || {
        let (model, curve) = train_specific(cfg, &dataset, &consistent, Some(dir))?;
        runner.record.stage2_curve = curve;
        let after = consistent.encoder_fingerprint()?;
        runner.record.encoder_hash_after = Some(after.clone());
        if runner.record.encoder_hash_before.as_deref() != Some(after.as_str()) {
            return Err(Error::invalid("consistent encoder changed during stage II"));
        }
        model.save(&dir.join("stage2.ckpt"))?;
        runner.record.artifacts.insert("stage2".into(), "stage2.ckpt".into());
        runner.write("stage2_curve", "stage2_curve.tsv", &stage2_table(hash, &runner.record.stage2_curve))?;
        Ok(model)
    })?;

    let latents = stage("extract", || {
        let mut l = extract_latents(&consistent, &specific, &dataset, cfg.stage2.batch_size)?;
        l.header.dataset = dataset.manifest.name.clone();
        l.save(&dir.join("latents"))?;
        runner.record.artifacts.insert("latents".into(), "latents".into());
        Ok(l)
    })?;

    stage("eval", || {
        runner.record.metrics = evaluate(cfg, &latents)?;
        let table = format!("{}{}", hash_line(hash), report_table(&runner.record.metrics));
        runner.write("metrics", "metrics.tsv", &table)
    })?;

    if cfg.audit.enabled {
        stage("audit", || {
            let rows = audit(cfg, &latents)?;
            runner.record.mean_mi = Some(mean_mi(&rows));
            runner.write("audit", "audit.tsv", &audit_table(hash, &rows))?;
            runner.record.audit = rows;
            Ok(())
        })?;
    }
    Ok(())
}
