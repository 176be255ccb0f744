//! Dense image arrays and the pixel-level view synthesizers (edge maps, colour jitter).

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// A batch of images stored contiguously in `N × C × H × W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageArray {
    pub fn new(
        n: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != n * channels * height * width {
            return Err(Error::shape(format!(
                "image array {n}x{channels}x{height}x{width} needs {} values, got {}",
                n * channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            n,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(n: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            n,
            channels,
            height,
            width,
            data: vec![0.0; n * channels * height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(n, channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.image_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copies the selected rows into a new array, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!(
                    "index {i} out of range for {} images",
                    self.n
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        Self::new(indices.len(), self.channels, self.height, self.width, data)
    }

    /// Stacks arrays of identical image geometry.
    pub fn concat(parts: &[ImageArray]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero image arrays"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(Error::shape("concatenated image arrays differ in geometry"));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Self::new(n, first.channels, first.height, first.width, data)
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (self.n, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pixel {pos} of image {} is not finite",
                pos / self.image_len().max(1)
            )));
        }
        Ok(())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Luminance (ITU-R 601) for RGB input, a copy for grayscale input.
    pub fn to_grayscale(&self) -> Result<Self> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let plane = self.height * self.width;
                let mut out = Self::zeros(self.n, 1, self.height, self.width);
                for i in 0..self.n {
                    let src = self.image(i);
                    let dst = out.image_mut(i);
                    for p in 0..plane {
                        dst[p] = luma(src[p], src[plane + p], src[2 * plane + p]);
                    }
                }
                Ok(out)
            }
            c => Err(Error::invalid(format!("unsupported channel count {c}"))),
        }
    }

    /// Centres every image on a larger zero canvas (e.g. 28×28 digits onto 32×32).
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::invalid(format!(
                "cannot pad {}x{} down to {height}x{width}",
                self.height, self.width
            )));
        }
        let top = (height - self.height) / 2;
        let left = (width - self.width) / 2;
        let mut out = Self::zeros(self.n, self.channels, height, width);
        for i in 0..self.n {
            let src = self.image(i);
            let dst = out.image_mut(i);
            for c in 0..self.channels {
                for y in 0..self.height {
                    let s = (c * self.height + y) * self.width;
                    let d = (c * height + y + top) * width + left;
                    dst[d..d + self.width].copy_from_slice(&src[s..s + self.width]);
                }
            }
        }
        Ok(out)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut out = Self::zeros(self.n, self.channels, h, w);
        for i in 0..self.n {
            let src = self.image(i);
            let dst = out.image_mut(i);
            for c in 0..self.channels {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..factor {
                            let row = (c * self.height + y * factor + dy) * self.width;
                            for dx in 0..factor {
                                acc += src[row + x * factor + dx];
                            }
                        }
                        dst[(c * h + y) * w + x] = acc * norm;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel gradient-magnitude edge map, min-max normalised per image.
///
/// RGB input is reduced to luminance first; borders replicate the nearest pixel so a
/// constant image has no response anywhere. An image whose gradient magnitude is
/// constant maps to all zeros.
pub fn synth_edge_view(images: &ImageArray) -> Result<ImageArray> {
    if images.is_empty() {
        return Err(Error::invalid("edge synthesis on an empty image array"));
    }
    images.check_finite()?;
    let gray = images.to_grayscale()?;
    let (n, _, h, w) = gray.dims();
    let mut out = ImageArray::zeros(n, 1, h, w);
    for i in 0..n {
        let src = gray.image(i);
        let dst = out.image_mut(i);
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            src[y * w + x]
        };
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0f32, 0.0f32);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = at(y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        gx += SOBEL_X[ky][kx] * v;
                        gy += SOBEL_Y[ky][kx] * v;
                    }
                }
                dst[y * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
        normalize_min_max(dst);
    }
    Ok(out)
}

fn normalize_min_max(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span <= f32::EPSILON * hi.abs().max(1.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
}

/// Closed interval a jitter factor is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterRange {
    pub lo: f32,
    pub hi: f32,
}

impl JitterRange {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f32) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f32 {
        let u: f32 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

/// Photometric perturbation ranges. Brightness, contrast and saturation are
/// multiplicative factors (1 = identity); hue is an additive shift in turns (0 = identity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: JitterRange,
    pub contrast: JitterRange,
    pub saturation: JitterRange,
    pub hue: JitterRange,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: JitterRange::new(0.6, 1.4),
            contrast: JitterRange::new(0.6, 1.4),
            saturation: JitterRange::new(0.6, 1.4),
            hue: JitterRange::new(-0.1, 0.1),
        }
    }
}

impl JitterConfig {
    pub fn identity() -> Self {
        Self {
            brightness: JitterRange::fixed(1.0),
            contrast: JitterRange::fixed(1.0),
            saturation: JitterRange::fixed(1.0),
            hue: JitterRange::fixed(0.0),
        }
    }

    fn needs_color(&self) -> bool {
        self.saturation != JitterRange::fixed(1.0) || self.hue != JitterRange::fixed(0.0)
    }

    fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(r.lo >= 0.0 && r.lo <= r.hi) {
                return Err(Error::invalid(format!(
                    "{name} range [{}, {}] must satisfy 0 <= lo <= hi",
                    r.lo, r.hi
                )));
            }
        }
        if !(self.hue.lo >= -0.5 && self.hue.lo <= self.hue.hi && self.hue.hi <= 0.5) {
            return Err(Error::invalid("hue range must lie in [-0.5, 0.5]"));
        }
        Ok(())
    }
}

/// Builds `n_views` photometric views: view 1 is the input, the others draw
/// independent brightness → contrast → saturation → hue perturbations per image.
pub fn synth_jitter_views(
    images: &ImageArray,
    n_views: usize,
    config: &JitterConfig,
    seed: u64,
) -> Result<Vec<ImageArray>> {
    if n_views < 2 {
        return Err(Error::invalid(format!("jitter needs >= 2 views, got {n_views}")));
    }
    if images.is_empty() {
        return Err(Error::invalid("jitter on an empty image array"));
    }
    config.validate()?;
    images.check_finite()?;
    if images.channels() != 3 && config.needs_color() {
        return Err(Error::invalid(format!(
            "hue/saturation jitter requires RGB input, got {} channel(s)",
            images.channels()
        )));
    }
    let mut views = Vec::with_capacity(n_views);
    views.push(images.clone());
    for view in 1..n_views {
        let mut rng = seeded(seed, view as u64);
        let mut out = images.clone();
        for i in 0..out.len() {
            let b = config.brightness.sample(&mut rng);
            let c = config.contrast.sample(&mut rng);
            let s = config.saturation.sample(&mut rng);
            let hshift = config.hue.sample(&mut rng);
            jitter_image(out.image_mut(i), images.channels(), b, c, s, hshift);
        }
        views.push(out);
    }
    Ok(views)
}

fn jitter_image(img: &mut [f32], channels: usize, b: f32, c: f32, s: f32, hshift: f32) {
    let plane = img.len() / channels;
    if b != 1.0 {
        img.iter_mut().for_each(|v| *v = (b * *v).clamp(0.0, 1.0));
    }
    if c != 1.0 {
        let mean = if channels == 3 {
            (0..plane)
                .map(|p| luma(img[p], img[plane + p], img[2 * plane + p]))
                .sum::<f32>()
                / plane as f32
        } else {
            img.iter().sum::<f32>() / plane as f32
        };
        img.iter_mut()
            .for_each(|v| *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0));
    }
    if channels != 3 {
        return;
    }
    if s != 1.0 {
        for p in 0..plane {
            let g = luma(img[p], img[plane + p], img[2 * plane + p]);
            for ch in 0..3 {
                let v = &mut img[ch * plane + p];
                *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0);
            }
        }
    }
    if hshift != 0.0 {
        for p in 0..plane {
            let (h, sat, val) = rgb_to_hsv(img[p], img[plane + p], img[2 * plane + p]);
            let (r, g, bl) = hsv_to_rgb((h + hshift).rem_euclid(1.0), sat, val);
            img[p] = r;
            img[plane + p] = g;
            img[2 * plane + p] = bl;
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}
