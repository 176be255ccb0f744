//! Downstream evaluation of extracted latents: k-means clustering and linear SVM
//! classification, each repeated over independent runs.

mod kmeans;
mod metrics;
mod svm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeans};
pub use metrics::{
    accuracy, contingency, f_score, hungarian, hungarian_accuracy, macro_f_score, nmi,
    per_class_counts,
};
pub use svm::{train_binary, LinearSvc, Standardizer, SvmOptions};

use crate::disentangle::Latents;
use crate::error::{Error, Result};
use crate::mi_audit::mean_var;
use crate::rng::{derive_seed, seeded, stream};

pub const KMEANS_MAX_ITER: usize = 300;
pub const DEFAULT_RUNS: usize = 10;

/// Which latent block(s) feed the downstream task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RepresentationSelector {
    C,
    /// Specific code of view `i` (1-based).
    S(usize),
    /// `c` concatenated with the first view's specific code.
    Cs1,
    /// `c` followed by every specific code.
    Concat,
}

impl RepresentationSelector {
    pub fn dim(&self, d_c: usize, d_s: usize, n_views: usize) -> usize {
        match self {
            Self::C => d_c,
            Self::S(_) => d_s,
            Self::Cs1 => d_c + d_s,
            Self::Concat => d_c + n_views * d_s,
        }
    }

    /// Selected features as `(n, dim)` f64 rows.
    pub fn select(&self, latents: &Latents) -> Result<(Vec<f64>, usize)> {
        let h = &latents.header;
        if let Self::S(i) = *self {
            if i == 0 || i > h.n_views {
                return Err(Error::invalid(format!(
                    "selector s{i} but the latents have {} views",
                    h.n_views
                )));
            }
        }
        let dim = self.dim(h.d_c, h.d_s, h.n_views);
        let blocks: Vec<(&[f32], usize)> = match *self {
            Self::C => vec![(&latents.c, h.d_c)],
            Self::S(i) => vec![(&latents.s[i - 1], h.d_s)],
            Self::Cs1 => vec![(&latents.c, h.d_c), (&latents.s[0], h.d_s)],
            Self::Concat => std::iter::once((latents.c.as_slice(), h.d_c))
                .chain(latents.s.iter().map(|s| (s.as_slice(), h.d_s)))
                .collect(),
        };
        let mut out = Vec::with_capacity(h.n_samples * dim);
        for i in 0..h.n_samples {
            for (data, d) in &blocks {
                out.extend(data[i * d..(i + 1) * d].iter().map(|&v| v as f64));
            }
        }
        Ok((out, dim))
    }
}

impl fmt::Display for RepresentationSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::C => write!(f, "c"),
            Self::S(i) => write!(f, "s{i}"),
            Self::Cs1 => write!(f, "cs1"),
            Self::Concat => write!(f, "concat"),
        }
    }
}

impl FromStr for RepresentationSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" => Ok(Self::C),
            "cs1" => Ok(Self::Cs1),
            "concat" => Ok(Self::Concat),
            _ => s
                .strip_prefix('s')
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|&i| i >= 1)
                .map(Self::S)
                .ok_or_else(|| Error::invalid(format!("unknown selector '{s}'"))),
        }
    }
}

impl TryFrom<String> for RepresentationSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RepresentationSelector> for String {
    fn from(s: RepresentationSelector) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Clustering,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Clustering => "clustering",
            Task::Classification => "classification",
        })
    }
}

/// One metric over repeated runs. `variance` is the population variance and
/// `std` its square root; both are kept since `±` columns are read either way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub metric: String,
    pub selector: RepresentationSelector,
    pub runs: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
}

/// Column order of [`MetricsReport::row`].
pub const REPORT_COLUMNS: [&str; 7] = ["task", "selector", "metric", "mean", "std", "variance", "runs"];

impl MetricsReport {
    pub fn from_runs(task: Task, metric: &str, selector: RepresentationSelector, runs: Vec<f64>) -> Self {
        let (mean, variance) = mean_var(&runs);
        Self {
            task,
            metric: metric.to_string(),
            selector,
            runs,
            mean,
            variance,
            std: variance.sqrt(),
        }
    }

    /// Aggregates recomputed from `runs` agree with the stored ones to 1e-12.
    pub fn is_consistent(&self) -> bool {
        let (mean, variance) = mean_var(&self.runs);
        (mean - self.mean).abs() <= 1e-12
            && (variance - self.variance).abs() <= 1e-12
            && (variance.sqrt() - self.std).abs() <= 1e-12
    }

    pub fn row(&self) -> Vec<String> {
        vec![
            self.task.to_string(),
            self.selector.to_string(),
            self.metric.clone(),
            format!("{:.6}", self.mean),
            format!("{:.6}", self.std),
            format!("{:.6e}", self.variance),
            self.runs.len().to_string(),
        ]
    }
}

/// Tab-separated table with a [`REPORT_COLUMNS`] header.
pub fn report_table(reports: &[MetricsReport]) -> String {
    let mut out = REPORT_COLUMNS.join("\t");
    out.push('\n');
    for r in reports {
        out.push_str(&r.row().join("\t"));
        out.push('\n');
    }
    out
}

/// Human-readable `mean ± std` lines, percentages as in published tables.
pub fn report_summary(reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .map(|r| {
            format!(
                "{:<15} {:<7} {:<6} {:6.2} ± {:.2}  (n = {})\n",
                r.task.to_string(),
                r.selector.to_string(),
                r.metric,
                100.0 * r.mean,
                100.0 * r.std,
                r.runs.len()
            )
        })
        .collect()
}

/// k-means with `k = n_classes` on every sample, fresh k-means++ seeding per run.
/// Returns the `acc` and `nmi` reports.
pub fn cluster_eval(
    latents: &Latents,
    selector: RepresentationSelector,
    n_classes: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    latents.validate()?;
    if runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    let (x, d) = selector.select(latents)?;
    let mut acc = Vec::with_capacity(runs);
    let mut nmis = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = seeded(derive_seed(seed, run as u64), stream::EVAL);
        let km = kmeans(&x, d, n_classes, KMEANS_MAX_ITER, &mut rng)?;
        acc.push(hungarian_accuracy(&latents.labels, &km.assignments)?);
        nmis.push(nmi(&latents.labels, &km.assignments)?);
    }
    Ok(vec![
        MetricsReport::from_runs(Task::Clustering, "acc", selector, acc),
        MetricsReport::from_runs(Task::Clustering, "nmi", selector, nmis),
    ])
}

fn gather(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect()
}

/// Linear SVM trained on the train split and scored on the test split. Runs differ
/// in the coordinate-descent visiting order. Returns the `acc` and macro `f` reports.
pub fn classify_eval(
    latents: &Latents,
    selector: RepresentationSelector,
    train: &[usize],
    test: &[usize],
    runs: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    latents.validate()?;
    if runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("classification needs non-empty train and test splits"));
    }
    let n = latents.len();
    if train.iter().chain(test).any(|&i| i >= n) {
        return Err(Error::invalid("split index out of range"));
    }
    let (x, d) = selector.select(latents)?;
    let y_train: Vec<u32> = train.iter().map(|&i| latents.labels[i]).collect();
    let y_test: Vec<u32> = test.iter().map(|&i| latents.labels[i]).collect();
    if let Some(missing) = y_test.iter().find(|l| !y_train.contains(l)) {
        return Err(Error::invalid(format!("class {missing} is absent from the train split")));
    }
    let (x_train, x_test) = (gather(&x, d, train), gather(&x, d, test));
    let opts = SvmOptions::default();
    let mut acc = Vec::with_capacity(runs);
    let mut fs = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = seeded(derive_seed(seed, run as u64), stream::EVAL);
        let svc = LinearSvc::fit(&x_train, d, &y_train, &opts, &mut rng)?;
        let pred = svc.predict(&x_test);
        acc.push(accuracy(&y_test, &pred)?);
        fs.push(macro_f_score(&y_test, &pred)?);
    }
    Ok(vec![
        MetricsReport::from_runs(Task::Classification, "acc", selector, acc),
        MetricsReport::from_runs(Task::Classification, "f", selector, fs),
    ])
}

/// [`classify_eval`] on the split stored in the latents header.
pub fn classify_eval_stored(
    latents: &Latents,
    selector: RepresentationSelector,
    runs: usize,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let h = &latents.header;
    classify_eval(latents, selector, &h.train_indices, &h.test_indices, runs, seed)
}
