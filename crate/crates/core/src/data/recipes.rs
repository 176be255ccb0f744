use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{
    group_into_views, synth_edge_view, synth_jitter_views, ImageArray, JitterConfig,
    MultiViewDataset, Synthesis,
};
use super::synthetic::{render_digits, render_objects};
use crate::error::{Error, Result};

/// The dataset families the toolkit knows how to build from single-view sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Grayscale digits + their edge map.
    EmnistEdge,
    /// Grayscale fashion items + their edge map.
    EfmnistEdge,
    /// Multiple images per object, grouped into triples.
    CoilGroup,
    /// RGB images + two colour-jittered copies.
    Jitter3,
}

impl Recipe {
    pub fn name(&self) -> &'static str {
        match self {
            Recipe::EmnistEdge => "emnist-edge",
            Recipe::EfmnistEdge => "efmnist-edge",
            Recipe::CoilGroup => "coil-group",
            Recipe::Jitter3 => "jitter3",
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emnist-edge" => Ok(Recipe::EmnistEdge),
            "efmnist-edge" => Ok(Recipe::EfmnistEdge),
            "coil-group" => Ok(Recipe::CoilGroup),
            "jitter3" => Ok(Recipe::Jitter3),
            other => Err(Error::invalid(format!("unknown recipe '{other}'"))),
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-view source images with one label (class or object id) per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImages {
    pub images: ImageArray,
    pub labels: Vec<u32>,
}

impl SourceImages {
    pub fn new(images: ImageArray, labels: Vec<u32>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    fn by_label(&self) -> Result<BTreeMap<u32, ImageArray>> {
        let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            rows.entry(l).or_default().push(i);
        }
        rows.into_iter()
            .map(|(l, idx)| Ok((l, self.images.gather(&idx)?)))
            .collect()
    }
}

/// Builds a multi-view dataset from a single-view source.
///
/// `size` is the target square resolution (32 or 64): smaller sources are
/// zero-padded, larger sources must be an integer multiple and are box-downsampled.
pub fn build_recipe(
    recipe: Recipe,
    source: &SourceImages,
    size: usize,
    jitter: &JitterConfig,
    split_ratio: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if source.images.is_empty() {
        return Err(Error::invalid("source has no images"));
    }
    if source.images.height() != source.images.width() {
        return Err(Error::invalid("source images must be square"));
    }
    let images = fit(&source.images, size)?;
    let (views, labels) = match recipe {
        Recipe::EmnistEdge | Recipe::EfmnistEdge => {
            let gray = images.to_grayscale()?;
            let edge = synth_edge_view(&gray)?;
            (
                vec![(Synthesis::Identity, gray), (Synthesis::Edge, edge)],
                source.labels.clone(),
            )
        }
        Recipe::CoilGroup => {
            let fitted = SourceImages::new(images, source.labels.clone())?;
            let (views, labels) = group_into_views(&fitted.by_label()?, 3, seed)?;
            (
                views.into_iter().map(|v| (Synthesis::Grouped, v)).collect(),
                labels,
            )
        }
        Recipe::Jitter3 => {
            let views = synth_jitter_views(&images, 3, jitter, seed)?;
            let views = views
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let kind = if i == 0 {
                        Synthesis::Identity
                    } else {
                        Synthesis::Jitter
                    };
                    (kind, v)
                })
                .collect();
            (views, source.labels.clone())
        }
    };
    MultiViewDataset::assemble(
        recipe.name(),
        recipe.name(),
        views,
        labels,
        split_ratio,
        seed,
        seed,
    )
}

/// Procedural stand-in source for `recipe` with roughly `n_samples` multi-view samples:
/// stroke digits for the edge recipes, rotating blob objects otherwise.
pub fn procedural_source(recipe: Recipe, n_samples: usize, seed: u64) -> Result<SourceImages> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let (images, labels) = match recipe {
        Recipe::EmnistEdge => render_digits(n_samples, 28, seed)?,
        Recipe::EfmnistEdge => render_digits(n_samples, 28, seed ^ 0xF0F0)?,
        Recipe::CoilGroup => {
            let objects = 20;
            let poses = 3 * n_samples.div_ceil(objects);
            render_objects(objects, poses, 64, 1, seed)?
        }
        Recipe::Jitter3 => {
            let objects = 10;
            render_objects(objects, n_samples.div_ceil(objects), 32, 3, seed)?
        }
    };
    SourceImages::new(images, labels)
}

/// [`build_recipe`] on a [`procedural_source`].
pub fn generate_dataset(
    recipe: Recipe,
    n_samples: usize,
    size: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    let source = procedural_source(recipe, n_samples, seed)?;
    build_recipe(recipe, &source, size, &JitterConfig::default(), split_ratio, seed)
}

fn fit(images: &ImageArray, size: usize) -> Result<ImageArray> {
    let h = images.height();
    if h == size {
        Ok(images.clone())
    } else if h < size {
        images.pad_to(size, size)
    } else if h % size == 0 {
        images.downsample(h / size)
    } else {
        Err(Error::invalid(format!(
            "cannot fit {h}x{h} sources to {size}x{size}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emnist_edge_recipe() {
        let (imgs, labels) = render_digits(50, 28, 0).unwrap();
        let src = SourceImages::new(imgs, labels).unwrap();
        let ds = build_recipe(Recipe::EmnistEdge, &src, 32, &JitterConfig::default(), 0.8, 1)
            .unwrap();
        assert_eq!(ds.n_views(), 2);
        assert_eq!(ds.views[1].dims(), (50, 1, 32, 32));
        assert_eq!(ds.manifest.train_indices.len(), 40);
        assert_eq!(ds.manifest.views[1].synthesis, Synthesis::Edge);
    }

    #[test]
    fn coil_group_recipe_keeps_object_labels() {
        let (imgs, labels) = render_objects(4, 10, 64, 1, 0).unwrap();
        let src = SourceImages::new(imgs, labels).unwrap();
        let ds = build_recipe(Recipe::CoilGroup, &src, 32, &JitterConfig::default(), 0.8, 2)
            .unwrap();
        assert_eq!(ds.len(), 4 * 3);
        assert_eq!(ds.n_views(), 3);
        assert_eq!(ds.views[0].height(), 32);
    }

    #[test]
    fn jitter_recipe_requires_rgb() {
        let (imgs, labels) = render_objects(2, 4, 32, 1, 0).unwrap();
        let src = SourceImages::new(imgs, labels).unwrap();
        assert!(build_recipe(Recipe::Jitter3, &src, 32, &JitterConfig::default(), 0.5, 0).is_err());
    }

    #[test]
    fn generated_datasets_have_requested_geometry() {
        let ds = generate_dataset(Recipe::EmnistEdge, 40, 32, 0.8, 3).unwrap();
        assert_eq!((ds.len(), ds.n_views()), (40, 2));
        let ds = generate_dataset(Recipe::CoilGroup, 40, 64, 0.8, 3).unwrap();
        assert_eq!((ds.len(), ds.n_views(), ds.views[0].height()), (40, 3, 64));
    }

    #[test]
    fn recipe_names_round_trip() {
        for r in [Recipe::EmnistEdge, Recipe::EfmnistEdge, Recipe::CoilGroup, Recipe::Jitter3] {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        assert!("mnist".parse::<Recipe>().is_err());
    }
}
