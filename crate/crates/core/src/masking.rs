//! Patch masks for masked cross-view prediction.
//!
//! Masking is pixel fill rather than token removal: the convolutional encoders
//! consume full frames, so hidden patches are overwritten with `fill`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageArray, MultiViewBatch};
use crate::error::{Error, Result};
use crate::round_half_up;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Exactly `round(ratio·P)` patches chosen uniformly.
    Random,
    /// One contiguous block: a rectangle plus at most one partial row.
    Block,
    /// Fixed evenly spaced lattice over the raster order of patches.
    Grid,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "block" => Ok(Self::Block),
            "grid" => Ok(Self::Grid),
            other => Err(Error::invalid(format!("unknown mask strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Block => "block",
            Self::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(default = "default_strategy")]
    pub strategy: MaskStrategy,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub fill: f32,
}

fn default_strategy() -> MaskStrategy {
    MaskStrategy::Random
}

fn default_ratio() -> f64 {
    0.7
}

fn default_patch() -> usize {
    4
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            ratio: default_ratio(),
            patch_size: default_patch(),
            fill: 0.0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)` for an image, checking that the patch size divides it.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {} does not divide {height}x{width}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }

    pub fn target_count(&self, patches: usize) -> usize {
        round_half_up(self.ratio * patches as f64).min(patches)
    }
}

/// Boolean mask over a patch grid, row-major; `true` = hidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    rows: usize,
    cols: usize,
    hidden: Vec<bool>,
}

impl PatchMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            hidden: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, hidden: Vec<bool>) -> Result<Self> {
        if hidden.len() != rows * cols {
            return Err(Error::shape("mask bits do not match the grid"));
        }
        Ok(Self { rows, cols, hidden })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.hidden
    }

    pub fn is_hidden(&self, row: usize, col: usize) -> bool {
        self.hidden[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.hidden.iter().filter(|&&h| h).count()
    }
}

pub fn generate_mask<R: Rng + ?Sized>(
    spec: &MaskSpec,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<PatchMask> {
    spec.validate()?;
    let total = rows * cols;
    if total == 0 {
        return Err(Error::invalid("patch grid must have at least one patch"));
    }
    let m = spec.target_count(total);
    let mut mask = PatchMask::empty(rows, cols);
    if m == 0 {
        return Ok(mask);
    }
    match spec.strategy {
        MaskStrategy::Random => {
            for i in sample(rng, total, m) {
                mask.hidden[i] = true;
            }
        }
        MaskStrategy::Block => {
            let first = (m as f64).sqrt().ceil() as usize;
            let width = (first.min(cols)..=cols)
                .find(|w| m.div_ceil(*w) <= rows)
                .expect("a full-width block always fits");
            let full_rows = m / width;
            let rem = m % width;
            let height = full_rows + usize::from(rem > 0);
            let top = rng.random_range(0..=rows - height);
            let left = rng.random_range(0..=cols - width);
            for r in 0..full_rows {
                for c in 0..width {
                    mask.hidden[(top + r) * cols + left + c] = true;
                }
            }
            if rem > 0 {
                let shift = rng.random_range(0..=width - rem);
                for c in 0..rem {
                    mask.hidden[(top + full_rows) * cols + left + shift + c] = true;
                }
            }
        }
        MaskStrategy::Grid => {
            for j in 0..total {
                mask.hidden[j] = (j + 1) * m / total > j * m / total;
            }
        }
    }
    Ok(mask)
}

/// Independent masks for every view of every sample: `masks[view][sample]`.
pub fn draw_batch_masks<R: Rng + ?Sized>(
    spec: &MaskSpec,
    batch: &MultiViewBatch,
    rng: &mut R,
) -> Result<Vec<Vec<PatchMask>>> {
    batch
        .views
        .iter()
        .map(|view| {
            let (rows, cols) = spec.grid(view.height(), view.width())?;
            (0..view.len())
                .map(|_| generate_mask(spec, rows, cols, rng))
                .collect()
        })
        .collect()
}

/// Returns a copy of `batch` with hidden patches overwritten by `spec.fill`.
pub fn apply_mask(
    batch: &MultiViewBatch,
    masks: &[Vec<PatchMask>],
    spec: &MaskSpec,
) -> Result<MultiViewBatch> {
    if masks.len() != batch.n_views() {
        return Err(Error::shape(format!(
            "{} mask sets for {} views",
            masks.len(),
            batch.n_views()
        )));
    }
    let views = batch
        .views
        .iter()
        .zip(masks)
        .map(|(view, view_masks)| mask_view(view, view_masks, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiViewBatch {
        views,
        labels: batch.labels.clone(),
        sample_ids: batch.sample_ids.clone(),
    })
}

fn mask_view(view: &ImageArray, masks: &[PatchMask], spec: &MaskSpec) -> Result<ImageArray> {
    let (rows, cols) = spec.grid(view.height(), view.width())?;
    if masks.len() != view.len() {
        return Err(Error::shape(format!(
            "{} masks for {} samples",
            masks.len(),
            view.len()
        )));
    }
    let (_, channels, h, w) = view.dims();
    let p = spec.patch_size;
    let mut out = view.clone();
    for (i, mask) in masks.iter().enumerate() {
        if (mask.rows, mask.cols) != (rows, cols) {
            return Err(Error::shape(format!(
                "mask grid {}x{} does not match {rows}x{cols}",
                mask.rows, mask.cols
            )));
        }
        let img = out.image_mut(i);
        for r in 0..rows {
            for c in 0..cols {
                if !mask.is_hidden(r, c) {
                    continue;
                }
                for ch in 0..channels {
                    for y in r * p..(r + 1) * p {
                        let row = (ch * h + y) * w;
                        img[row + c * p..row + (c + 1) * p].fill(spec.fill);
                    }
                }
            }
        }
    }
    Ok(out)
}
