use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{Fusion, Stage1Config};
use crate::data::{Recipe, Split};
use crate::disentangle::{Stage2Config, Stage2Weights};
use crate::error::{Error, Result};
use crate::eval::RepresentationSelector;
use crate::masking::{MaskSpec, MaskStrategy};
use crate::mi_audit::MineConfig;
use crate::rng::derive_seed;
use crate::train::Schedule;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MRDD_OUT";

/// Where the multi-view data comes from: a saved dataset directory, or a
/// procedurally generated stand-in for `recipe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_recipe")]
    pub recipe: String,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_recipe() -> String {
    "emnist-edge".into()
}

fn default_samples() -> usize {
    10_000
}

fn default_size() -> usize {
    32
}

fn default_split() -> f64 {
    0.8
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            recipe: default_recipe(),
            n_samples: default_samples(),
            size: default_size(),
            split_ratio: default_split(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ten")]
    pub d_c: usize,
    #[serde(default = "ten")]
    pub d_s: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "default_club_hidden")]
    pub club_hidden: Vec<usize>,
}

fn ten() -> usize {
    10
}

fn default_base() -> usize {
    16
}

fn default_dropout() -> f64 {
    0.1
}

fn default_club_hidden() -> Vec<usize> {
    vec![256, 256]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_c: 10,
            d_s: 10,
            base_channels: default_base(),
            dropout: default_dropout(),
            fusion: Fusion::default(),
            club_hidden: default_club_hidden(),
        }
    }
}

/// Mask settings; `patch_size` defaults to an 8×8 patch grid for the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_strategy")]
    pub strategy: MaskStrategy,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default)]
    pub fill: f32,
}

fn default_strategy() -> MaskStrategy {
    MaskStrategy::Random
}

fn default_ratio() -> f64 {
    0.7
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Random,
            ratio: default_ratio(),
            patch_size: None,
            fill: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn spec(&self, image_size: usize) -> MaskSpec {
        MaskSpec {
            strategy: self.strategy,
            ratio: self.ratio,
            patch_size: self.patch_size.unwrap_or((image_size / 8).max(1)),
            fill: self.fill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    /// When false the consistent model keeps its random initialization and is
    /// frozen as is.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "yes")]
    pub cosine: bool,
    /// KL weight β_c.
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default = "all")]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "yes")]
    pub cosine: bool,
    #[serde(default = "one")]
    pub lambda_d: f64,
    #[serde(default = "one")]
    pub lambda_r: f64,
    /// KL weight β_s.
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub sample_c: bool,
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default = "all")]
    pub split: Split,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

fn all() -> Split {
    Split::All
}

fn default_epochs() -> usize {
    200
}

fn default_batch() -> usize {
    512
}

fn default_lr() -> f64 {
    5e-4
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            cosine: true,
            beta: 1.0,
            dropout: true,
            split: Split::All,
        }
    }
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            cosine: true,
            lambda_d: 1.0,
            lambda_r: 1.0,
            beta: 1.0,
            sample_c: false,
            dropout: true,
            split: Split::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_selectors")]
    pub selectors: Vec<RepresentationSelector>,
}

fn default_runs() -> usize {
    10
}

fn default_selectors() -> Vec<RepresentationSelector> {
    vec![RepresentationSelector::C, RepresentationSelector::Cs1]
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: default_runs(),
            selectors: default_selectors(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub mine: MineConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mine: MineConfig::default(),
        }
    }
}

/// Everything one end-to-end run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Output root; falls back to `$MRDD_OUT`, then `runs`. Not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn default_name() -> String {
    "mrdd".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            eval: EvalConfig::default(),
            audit: AuditConfig::default(),
        }
    }
}

/// Seed offsets of the derived streams.
const SEED_STAGE1: u64 = 1;
const SEED_STAGE2: u64 = 2;
const SEED_EVAL: u64 = 3;
const SEED_AUDIT: u64 = 4;
const SEED_INIT1: u64 = 5;
const SEED_INIT2: u64 = 6;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be non-empty and contain no path separators");
        }
        if self.model.d_c == 0 || self.model.d_s == 0 || self.model.base_channels == 0 {
            return bad("d_c, d_s and base_channels must be >= 1");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.data.dir.is_none() {
            self.data.recipe.parse::<Recipe>()?;
            if self.data.n_samples == 0 {
                return bad("data.n_samples must be >= 1");
            }
        }
        if !(self.data.size == 32 || self.data.size == 64) {
            return bad("data.size must be 32 or 64");
        }
        self.mask.spec(self.data.size).grid(self.data.size, self.data.size)?;
        self.stage1_config().schedule.validate()?;
        self.stage2_config().schedule.validate()?;
        for (name, w) in [
            ("stage1.beta", self.stage1.beta),
            ("stage2.beta", self.stage2.beta),
            ("stage2.lambda_d", self.stage2.lambda_d),
            ("stage2.lambda_r", self.stage2.lambda_r),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.eval.runs == 0 || self.eval.selectors.is_empty() {
            return bad("eval needs runs >= 1 and at least one selector");
        }
        if self.audit.enabled {
            self.audit.mine.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form, excluding `out_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        let value = serde_json::to_value(&c)?;
        let text = serde_json::to_string(&canonical(value))?;
        Ok(hex(&Sha256::digest(text.as_bytes())))
    }

    /// Output root: `out_dir`, else `$MRDD_OUT`, else `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// `<out_root>/<name>-<first 12 hash chars>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out_root().join(format!("{}-{}", self.name, &self.hash()?[..12])))
    }

    pub fn mask_spec(&self) -> MaskSpec {
        self.mask.spec(self.data.size)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let s = &self.stage1;
        Stage1Config {
            schedule: Schedule {
                epochs: s.epochs,
                batch_size: s.batch_size,
                lr: s.lr,
                cosine: s.cosine,
            },
            mask: self.mask_spec(),
            beta: s.beta,
            split: s.split,
            dropout: s.dropout,
            seed: derive_seed(self.seed, SEED_STAGE1),
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        let s = &self.stage2;
        Stage2Config {
            schedule: Schedule {
                epochs: s.epochs,
                batch_size: s.batch_size,
                lr: s.lr,
                cosine: s.cosine,
            },
            weights: Stage2Weights {
                lambda_d: s.lambda_d,
                lambda_r: s.lambda_r,
                beta: s.beta,
            },
            sample_c: s.sample_c,
            split: s.split,
            dropout: s.dropout,
            seed: derive_seed(self.seed, SEED_STAGE2),
        }
    }

    pub fn init_seeds(&self) -> (u64, u64) {
        (derive_seed(self.seed, SEED_INIT1), derive_seed(self.seed, SEED_INIT2))
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_EVAL)
    }

    pub fn audit_seed(&self) -> u64 {
        derive_seed(self.seed, SEED_AUDIT)
    }
}

/// Recursively key-sorted copy of a JSON value.
fn canonical(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, canonical(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonical).collect()),
        other => other,
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
