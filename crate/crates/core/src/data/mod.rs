//! Multi-view datasets: view synthesis, grouping, splitting, batching and storage.

mod image;
mod recipes;
mod storage;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::round_half_up;

pub use image::{synth_edge_view, synth_jitter_views, ImageArray, JitterConfig, JitterRange};
pub use recipes::{build_recipe, generate_dataset, procedural_source, Recipe, SourceImages};
pub use storage::{
    load_dataset, load_source, read_f32_array, read_labels, save_dataset, save_source, write_f32_array,
    write_labels,
};

/// How a view was derived from the source images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthesis {
    Identity,
    Edge,
    Jitter,
    Grouped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    /// 1-based view number.
    pub view_index: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub synthesis: Synthesis,
    /// Array file, relative to the dataset directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub recipe: String,
    pub n_samples: usize,
    pub n_classes: usize,
    pub source_seed: u64,
    pub split_seed: u64,
    pub split_ratio: f64,
    pub views: Vec<ViewSpec>,
    pub label_file: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl DatasetManifest {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::invalid("dataset has no views"));
        }
        let (h, w) = (self.views[0].height, self.views[0].width);
        for v in &self.views {
            if (v.height, v.width) != (h, w) {
                return Err(Error::invalid(format!(
                    "view {} is {}x{}, expected {h}x{w}",
                    v.view_index, v.height, v.width
                )));
            }
            if v.channels != 1 && v.channels != 3 {
                return Err(Error::invalid(format!(
                    "view {} has {} channels",
                    v.view_index, v.channels
                )));
            }
        }
        let mut seen = vec![false; self.n_samples];
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            if i >= self.n_samples || seen[i] {
                return Err(Error::invalid(format!(
                    "split is not a partition of 0..{} (index {i})",
                    self.n_samples
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split does not cover every sample"));
        }
        Ok(())
    }
}

/// An aligned multi-view dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub manifest: DatasetManifest,
    pub views: Vec<ImageArray>,
    pub labels: Vec<u32>,
}

impl MultiViewDataset {
    /// Assembles a dataset and draws its stratified train/test split.
    pub fn assemble(
        name: &str,
        recipe: &str,
        views: Vec<(Synthesis, ImageArray)>,
        labels: Vec<u32>,
        split_ratio: f64,
        split_seed: u64,
        source_seed: u64,
    ) -> Result<Self> {
        let n = labels.len();
        let mut specs = Vec::with_capacity(views.len());
        let mut arrays = Vec::with_capacity(views.len());
        for (i, (synthesis, arr)) in views.into_iter().enumerate() {
            if arr.len() != n {
                return Err(Error::shape(format!(
                    "view {} has {} rows but there are {n} labels",
                    i + 1,
                    arr.len()
                )));
            }
            if !arr.in_unit_range() {
                return Err(Error::invalid(format!("view {} has pixels outside [0,1]", i + 1)));
            }
            specs.push(ViewSpec {
                view_index: i + 1,
                height: arr.height(),
                width: arr.width(),
                channels: arr.channels(),
                synthesis,
                file: format!("view{}.bin", i + 1),
            });
            arrays.push(arr);
        }
        let (train, test) = split_dataset(Some(&labels), n, split_ratio, split_seed)?;
        let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let manifest = DatasetManifest {
            name: name.to_string(),
            recipe: recipe.to_string(),
            n_samples: n,
            n_classes,
            source_seed,
            split_seed,
            split_ratio,
            views: specs,
            label_file: "labels.bin".into(),
            train_indices: train,
            test_indices: test,
        };
        manifest.validate()?;
        Ok(Self {
            manifest,
            views: arrays,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.manifest.train_indices.clone(),
            Split::Test => self.manifest.test_indices.clone(),
            Split::All => (0..self.len()).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<MultiViewBatch> {
        let views = self
            .views
            .iter()
            .map(|v| v.gather(indices))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiViewBatch {
            views,
            labels: Some(indices.iter().map(|&i| self.labels[i]).collect()),
            sample_ids: indices.to_vec(),
        })
    }

    /// Batches over one split. Order is a pure function of `seed`; salt the seed per
    /// epoch (see [`epoch_seed`]) for a fresh order each epoch.
    pub fn iter_batches(
        &self,
        split: &str,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
    ) -> Result<BatchIter<'_>> {
        let split: Split = split.parse()?;
        let plan = batch_indices(&self.indices(split), batch_size, shuffle, seed)?;
        Ok(BatchIter {
            dataset: self,
            plan: plan.into_iter(),
        })
    }
}

pub struct BatchIter<'a> {
    dataset: &'a MultiViewDataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = MultiViewBatch;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.plan.next()?;
        Some(
            self.dataset
                .batch(&idx)
                .expect("batch plan indices come from the dataset"),
        )
    }
}

/// One minibatch: aligned per-view images plus sample ids and (optional) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch {
    pub views: Vec<ImageArray>,
    pub labels: Option<Vec<u32>>,
    pub sample_ids: Vec<usize>,
}

impl MultiViewBatch {
    pub fn new(views: Vec<ImageArray>, labels: Option<Vec<u32>>) -> Result<Self> {
        let n = views.first().map_or(0, ImageArray::len);
        if views.iter().any(|v| v.len() != n) {
            return Err(Error::shape("views in a batch differ in length"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::shape("label count differs from batch length"));
        }
        Ok(Self {
            views,
            labels,
            sample_ids: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::invalid(format!(
                "unknown split '{other}' (expected train, test or all)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::rng::derive_seed(seed, 0x1000 + epoch as u64)
}

/// Chunks `indices` into batches; the last batch may be short.
pub fn batch_indices(
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut seeded(seed, stream::SHUFFLE));
    } else {
        order.sort_unstable();
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Partitions `0..n` into train/test index lists (both ascending).
///
/// With labels the split is stratified: per-class train counts are allocated by
/// largest remainder so the total is `round(ratio·n)`; every class keeps at
/// least one sample on each side unless that total rules it out.
pub fn split_dataset(
    labels: Option<&[u32]>,
    n: usize,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut rng = seeded(seed, stream::SPLIT);
    let target = round_half_up(ratio * n as f64);
    let (mut train, mut test) = match labels {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let k = target.min(n);
            (order[..k].to_vec(), order[k..].to_vec())
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::shape("label count differs from n"));
            }
            let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                classes.entry(l).or_default().push(i);
            }
            if let Some((c, members)) = classes.iter().find(|(_, m)| m.len() < 2) {
                return Err(Error::invalid(format!(
                    "class {c} has {} sample(s); stratified split needs >= 2",
                    members.len()
                )));
            }
            let quotas = allocate_quotas(
                &classes.values().map(Vec::len).collect::<Vec<_>>(),
                ratio,
                target,
            );
            let mut train = Vec::with_capacity(target);
            let mut test = Vec::with_capacity(n - target);
            for (members, k) in classes.into_values().zip(quotas) {
                let mut members = members;
                members.shuffle(&mut rng);
                train.extend_from_slice(&members[..k]);
                test.extend_from_slice(&members[k..]);
            }
            (train, test)
        }
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn allocate_quotas(sizes: &[usize], ratio: f64, target: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&s| ratio * s as f64).collect();
    // every class stays within one sample of its exact share and, where the
    // total allows it, keeps at least one sample on both sides
    let bounds = |keep_both: bool| -> (Vec<usize>, Vec<usize>) {
        let floor = usize::from(keep_both);
        let lo = exact
            .iter()
            .map(|&q| (q - 1.0 - 1e-9).ceil().max(floor as f64) as usize)
            .collect();
        let hi = exact
            .iter()
            .zip(sizes)
            .map(|(&q, &s)| ((q + 1.0 + 1e-9).floor() as usize).min(s - floor))
            .collect();
        (lo, hi)
    };
    let (strict_lo, strict_hi) = bounds(true);
    let feasible = strict_lo.iter().sum::<usize>() <= target && target <= strict_hi.iter().sum::<usize>();
    let (lo, hi) = if feasible { (strict_lo, strict_hi) } else { bounds(false) };
    let mut quota: Vec<usize> = exact
        .iter()
        .enumerate()
        .map(|(i, &q)| (q.floor() as usize).clamp(lo[i], hi[i].max(lo[i])))
        .collect();
    loop {
        let total: usize = quota.iter().sum();
        if total == target {
            break;
        }
        let frac = |i: usize| exact[i] - quota[i] as f64;
        let pick = if total < target {
            (0..sizes.len())
                .filter(|&i| quota[i] < hi[i])
                .max_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(b.cmp(&a)))
        } else {
            (0..sizes.len())
                .filter(|&i| quota[i] > lo[i])
                .min_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(a.cmp(&b)))
        };
        match pick {
            Some(i) if total < target => quota[i] += 1,
            Some(i) => quota[i] -= 1,
            None => break,
        }
    }
    quota
}

/// Randomly partitions each object's images into tuples of `n_views`; every tuple
/// becomes one sample labelled with the object id. Leftover images are dropped.
pub fn group_into_views(
    objects: &BTreeMap<u32, ImageArray>,
    n_views: usize,
    seed: u64,
) -> Result<(Vec<ImageArray>, Vec<u32>)> {
    if n_views == 0 {
        return Err(Error::invalid("n_views must be >= 1"));
    }
    let first = objects
        .values()
        .next()
        .ok_or_else(|| Error::invalid("no objects to group"))?;
    let geometry = (first.channels(), first.height(), first.width());
    let mut rng = seeded(seed, stream::DATA);
    let mut per_view: Vec<Vec<usize>> = vec![Vec::new(); n_views];
    let mut sources: Vec<&ImageArray> = Vec::new();
    let mut offsets = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for (&object, images) in objects {
        if images.len() < n_views {
            return Err(Error::invalid(format!(
                "object {object} has {} image(s), needs at least {n_views}",
                images.len()
            )));
        }
        if (images.channels(), images.height(), images.width()) != geometry {
            return Err(Error::shape(format!("object {object} differs in image geometry")));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        for tuple in order.chunks_exact(n_views) {
            for (view, &img) in tuple.iter().enumerate() {
                per_view[view].push(offset + img);
            }
            labels.push(object);
        }
        sources.push(images);
        offsets.push(offset);
        offset += images.len();
    }
    let all = ImageArray::concat(&sources.into_iter().cloned().collect::<Vec<_>>())?;
    let views = per_view
        .iter()
        .map(|idx| all.gather(idx))
        .collect::<Result<Vec<_>>>()?;
    Ok((views, labels))
}
