use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mrdd_core::consistency::ConsistentModel;
use mrdd_core::data::{build_recipe, load_source, procedural_source, save_dataset, save_source, JitterConfig, Recipe};
use mrdd_core::disentangle::{extract_latents, Latents, SpecificModel};
use mrdd_core::eval::{classify_eval_stored, cluster_eval, report_summary, report_table, RepresentationSelector};
use mrdd_core::mi_audit::{audit_redundancy, MineConfig};
use mrdd_core::pipeline::{
    ablate_components, ablate_mask_strategy, audit_table, collect_report, load_data, run_full, stage1_table,
    stage2_table, sweep_dims, sweep_mask_ratio, train_consistent, train_specific, ExperimentConfig, RunRecord,
    RunStatus, Table,
};

/// Two-stage multi-view representation learning.
#[derive(Parser)]
#[command(name = "mrdd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train one stage.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Write latent bundles for every sample of the configured dataset.
    Extract(ExtractArgs),
    /// Cluster or classify with stored latents.
    Eval(EvalArgs),
    /// Estimate I(c; s^i) per view with MINE.
    AuditMi(AuditArgs),
    /// Run every stage end to end.
    Run(ConfigArg),
    /// Sweep one hyperparameter.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Ablation studies.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Collect finished runs into one table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Render a procedural source directory for a recipe.
    Generate {
        #[arg(long)]
        recipe: Recipe,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a multi-view dataset from a source directory.
    Synth {
        #[arg(long)]
        recipe: Recipe,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Masked cross-view prediction.
    Stage1 {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// View-specific encoders against a frozen stage-I checkpoint.
    Stage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    stage2: PathBuf,
    /// Latents directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cluster,
    Classify,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    selector: RepresentationSelector,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// MINE settings are taken from `[audit.mine]`; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Classification accuracy per mask ratio.
    Mask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = default_ratios())]
        ratios: Vec<f64>,
    },
    /// Clustering accuracy per (d_c, d_s) cell.
    Dims {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 15, 20])]
        dc: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 15, 20, 40])]
        ds: Vec<usize>,
    },
}

fn default_ratios() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Full model against runs with one component removed.
    Components(ConfigArg),
    /// Random, block and grid masks at ratio 0.7.
    Strategy(ConfigArg),
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Data(DataCommand::Generate { recipe, n, out, seed }) => {
            let source = procedural_source(recipe, n, seed)?;
            save_source(&out, &source)?;
            info!("wrote {} source images to {}", source.labels.len(), out.display());
        }
        Command::Data(DataCommand::Synth {
            recipe,
            src,
            out,
            seed,
            size,
            split_ratio,
        }) => {
            let source = load_source(&src).with_context(|| format!("reading source {}", src.display()))?;
            let ds = build_recipe(recipe, &source, size, &JitterConfig::default(), split_ratio, seed)?;
            save_dataset(&out, &ds)?;
            info!("wrote {} ({} samples, {} views) to {}", ds.manifest.name, ds.len(), ds.n_views(), out.display());
        }
        Command::Train(TrainCommand::Stage1 { config, out }) => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(&cfg, out)?;
            let ds = load_data(&cfg)?;
            let (model, curve) = train_consistent(&cfg, &ds, Some(&out))?;
            model.save(&out.join("stage1.ckpt"))?;
            std::fs::write(out.join("stage1_curve.tsv"), stage1_table(&cfg.hash()?, &curve))?;
            info!("stage I checkpoint at {}", out.join("stage1.ckpt").display());
        }
        Command::Train(TrainCommand::Stage2 { config, stage1, out }) => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = output_dir(&cfg, out)?;
            let ds = load_data(&cfg)?;
            let mut consistent = ConsistentModel::load(&stage1, DType::F32)?;
            consistent.freeze();
            let (model, curve) = train_specific(&cfg, &ds, &consistent, Some(&out))?;
            model.save(&out.join("stage2.ckpt"))?;
            std::fs::write(out.join("stage2_curve.tsv"), stage2_table(&cfg.hash()?, &curve))?;
            info!("stage II checkpoint at {}", out.join("stage2.ckpt").display());
        }
        Command::Extract(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let ds = load_data(&cfg)?;
            let consistent = ConsistentModel::load(&a.stage1, DType::F32)?;
            let specific = SpecificModel::load(&a.stage2, DType::F32)?;
            let mut latents = extract_latents(&consistent, &specific, &ds, cfg.stage2.batch_size)?;
            latents.header.dataset = ds.manifest.name.clone();
            latents.save(&a.out)?;
            info!("wrote {} latent bundles to {}", latents.len(), a.out.display());
        }
        Command::Eval(a) => {
            let latents = Latents::load(&a.latents)?;
            let reports = match a.task {
                TaskArg::Cluster => cluster_eval(&latents, a.selector, latents.header.n_classes, a.runs, a.seed)?,
                TaskArg::Classify => classify_eval_stored(&latents, a.selector, a.runs, a.seed)?,
            };
            let table = report_table(&reports);
            print!("{table}");
            eprint!("{}", report_summary(&reports));
            if let Some(out) = a.out {
                std::fs::write(out, table)?;
            }
        }
        Command::AuditMi(a) => {
            let latents = Latents::load(&a.latents)?;
            let (mine, hash) = match &a.config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(path)?;
                    let hash = cfg.hash()?;
                    (cfg.audit.mine, hash)
                }
                None => (MineConfig::default(), "none".to_string()),
            };
            let rows = audit_redundancy(&latents, &mine, a.seed)?;
            let table = audit_table(&hash, &rows);
            std::fs::write(&a.out, &table)?;
            print!("{table}");
        }
        Command::Run(a) => {
            let record = run_full(&ExperimentConfig::load(&a.config)?)?;
            println!("{}", record.run_dir.display());
            check(&[record])?;
        }
        Command::Sweep(SweepCommand::Mask { config, ratios }) => {
            let (table, records) = sweep_mask_ratio(&ExperimentConfig::load(&config)?, &ratios)?;
            finish(&table, &records)?;
        }
        Command::Sweep(SweepCommand::Dims { config, dc, ds }) => {
            let (table, records) = sweep_dims(&ExperimentConfig::load(&config)?, &dc, &ds)?;
            finish(&table, &records)?;
        }
        Command::Ablate(AblateCommand::Components(a)) => {
            let (table, records) = ablate_components(&ExperimentConfig::load(&a.config)?)?;
            finish(&table, &records)?;
        }
        Command::Ablate(AblateCommand::Strategy(a)) => {
            let (table, records) = ablate_mask_strategy(&ExperimentConfig::load(&a.config)?)?;
            finish(&table, &records)?;
        }
        Command::Report(a) => {
            let table = collect_report(&a.runs)?;
            print!("{}", table.to_tsv());
            if let Some(out) = a.out {
                table.write(&out)?;
            }
        }
    }
    Ok(())
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = match out {
        Some(dir) => dir,
        None => cfg.run_dir()?,
    };
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("config.toml"))?;
    Ok(dir)
}

fn finish(table: &Table, records: &[RunRecord]) -> Result<()> {
    print!("{}", table.to_tsv());
    check(records)
}

/// Fails when any run stopped early.
fn check(records: &[RunRecord]) -> Result<()> {
    let failed: Vec<String> = records
        .iter()
        .filter_map(|r| match &r.status {
            RunStatus::Failed { stage, error } => {
                Some(format!("{} failed at {stage}: {error}", r.run_dir.display()))
            }
            _ => None,
        })
        .collect();
    if !failed.is_empty() {
        bail!("{}", failed.join("; "));
    }
    Ok(())
}
