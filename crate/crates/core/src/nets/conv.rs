//! Convolutional encoders and decoders.
//!
//! An encoder block is conv → BN → ReLU → conv → BN → ReLU → dropout with 3×3
//! kernels; the first conv of a block carries the stride. Channels double per
//! block from `base_channels`. 32-pixel inputs use three blocks and 64-pixel
//! inputs four, and in both cases the final feature plane is 8×8 (the last block
//! keeps stride 1). Decoders mirror the encoder with
//! transposed convolutions and end in a sigmoid.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::fused;
use super::gaussian::GaussianPosterior;
use super::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Linear, ParamBuilder, Pass};
use crate::error::{Error, Result};

/// Side length of the feature plane every encoder emits.
pub const FEATURE_PLANE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub latent_dim: usize,
}

fn default_base() -> usize {
    16
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderSpec {
    pub fn new(size: usize, channels: usize, latent_dim: usize) -> Self {
        Self {
            height: size,
            width: size,
            channels,
            base_channels: default_base(),
            dropout: default_dropout(),
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != self.width || !(self.height == 32 || self.height == 64) {
            return Err(Error::invalid(format!(
                "unsupported input size {}x{} (expected 32x32 or 64x64)",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("channels, base channels and latent dim must be >= 1"));
        }
        Dropout::new(self.dropout)?;
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        if self.height == 64 {
            4
        } else {
            3
        }
    }

    /// Stride of the first conv in each block. The last block keeps its input
    /// resolution, which lands both supported sizes on the 8×8 plane.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.n_blocks()];
        s[self.n_blocks() - 1] = 1;
        s
    }

    /// Output channels of each block.
    pub fn block_channels(&self) -> Vec<usize> {
        (0..self.n_blocks())
            .map(|k| self.base_channels << k)
            .collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.base_channels << (self.n_blocks() - 1)
    }

    /// Flattened width of the trunk output.
    pub fn feature_dim(&self) -> usize {
        self.feature_channels() * FEATURE_PLANE * FEATURE_PLANE
    }

    pub fn with_latent(&self, latent_dim: usize) -> Self {
        Self {
            latent_dim,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    dropout: Dropout,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor> {
        let h = fused::relu(&self.bn1.forward(&self.conv1.forward(x)?, pass)?)?;
        let h = fused::relu(&self.bn2.forward(&self.conv2.forward(&h)?, pass)?)?;
        self.dropout.forward(&h, pass)
    }
}

/// The convolutional stack without a head: image → flattened 8×8 feature map.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    spec: EncoderSpec,
    blocks: Vec<EncoderBlock>,
}

impl ConvTrunk {
    pub fn new(spec: &EncoderSpec, pb: &mut ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let dropout = Dropout::new(spec.dropout)?;
        let mut blocks = Vec::with_capacity(spec.n_blocks());
        let mut in_ch = spec.channels;
        for (k, (out_ch, stride)) in spec
            .block_channels()
            .into_iter()
            .zip(spec.strides())
            .enumerate()
        {
            let block = pb.scope(&format!("block{k}"), |pb| {
                Ok(EncoderBlock {
                    conv1: Conv2d::new(pb, "conv1", in_ch, out_ch, 3, stride, 1)?,
                    bn1: BatchNorm2d::new(pb, "bn1", out_ch)?,
                    conv2: Conv2d::new(pb, "conv2", out_ch, out_ch, 3, 1, 1)?,
                    bn2: BatchNorm2d::new(pb, "bn2", out_ch)?,
                    dropout,
                })
            })?;
            blocks.push(block);
            in_ch = out_ch;
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `(batch, C, H, W)` → `(batch, feature_channels, 8, 8)`.
    pub fn feature_map(&self, x: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (self.spec.channels, self.spec.height, self.spec.width) {
            return Err(Error::shape(format!(
                "encoder expects {}x{}x{} input, got {c}x{h}x{w}",
                self.spec.channels, self.spec.height, self.spec.width
            )));
        }
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, pass)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor> {
        Ok(self.feature_map(x, pass)?.flatten_from(1)?)
    }
}

/// Affine map from features to `(μ, log σ²)`.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    linear: Linear,
}

impl GaussianHead {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, latent_dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(pb, name, in_dim, 2 * latent_dim)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.linear.out_dim() / 2
    }

    pub fn forward(&self, features: &Tensor) -> Result<GaussianPosterior> {
        GaussianPosterior::from_head(&self.linear.forward(features)?)
    }
}

/// Image → Gaussian posterior over a `latent_dim` code.
#[derive(Debug, Clone)]
pub struct Encoder {
    trunk: ConvTrunk,
    head: GaussianHead,
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        self.trunk.spec()
    }

    pub fn trunk(&self) -> &ConvTrunk {
        &self.trunk
    }

    pub fn forward(&self, x: &Tensor, pass: &mut Pass<'_>) -> Result<GaussianPosterior> {
        self.head.forward(&self.trunk.forward(x, pass)?)
    }
}

pub fn build_encoder(spec: &EncoderSpec, pb: &mut ParamBuilder) -> Result<Encoder> {
    let trunk = pb.scope("trunk", |pb| ConvTrunk::new(spec, pb))?;
    let head = GaussianHead::new(pb, "head", spec.feature_dim(), spec.latent_dim)?;
    Ok(Encoder { trunk, head })
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    deconv1: ConvTranspose2d,
    bn1: BatchNorm2d,
    deconv2: ConvTranspose2d,
    /// Absent on the output block, which ends in a sigmoid instead.
    bn2: Option<BatchNorm2d>,
}

/// Latent → image, mirroring an [`EncoderSpec`].
#[derive(Debug, Clone)]
pub struct Decoder {
    spec: EncoderSpec,
    fc: Linear,
    blocks: Vec<DecoderBlock>,
    calls: Arc<AtomicUsize>,
}

impl Decoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Number of forward passes so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn forward(&self, z: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor> {
        let (n, d) = z.dims2()?;
        if d != self.spec.latent_dim {
            return Err(Error::shape(format!(
                "decoder expects latent dim {}, got {d}",
                self.spec.latent_dim
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let c = self.spec.feature_channels();
        let mut h = fused::relu(&self.fc.forward(z)?)?.reshape((n, c, FEATURE_PLANE, FEATURE_PLANE))?;
        for block in &self.blocks {
            h = fused::relu(&block.bn1.forward(&block.deconv1.forward(&h)?, pass)?)?;
            h = block.deconv2.forward(&h)?;
            h = match &block.bn2 {
                Some(bn) => fused::relu(&bn.forward(&h, pass)?)?,
                None => sigmoid(&h)?,
            };
        }
        Ok(h)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    fused::sigmoid(x)
}

pub fn build_decoder(spec: &EncoderSpec, pb: &mut ParamBuilder) -> Result<Decoder> {
    spec.validate()?;
    let fc = Linear::new(pb, "fc", spec.latent_dim, spec.feature_dim())?;
    let channels = spec.block_channels();
    let strides = spec.strides();
    let mut blocks = Vec::with_capacity(channels.len());
    for k in (0..channels.len()).rev() {
        let c_in = channels[k];
        let c_out = if k == 0 { spec.channels } else { channels[k - 1] };
        let last = k == 0;
        let block = pb.scope(&format!("block{}", channels.len() - 1 - k), |pb| {
            Ok(DecoderBlock {
                deconv1: ConvTranspose2d::new(pb, "deconv1", c_in, c_in, 3, 1, 1)?,
                bn1: BatchNorm2d::new(pb, "bn1", c_in)?,
                deconv2: ConvTranspose2d::new(pb, "deconv2", c_in, c_out, 3, strides[k], 1)?,
                bn2: if last {
                    None
                } else {
                    Some(BatchNorm2d::new(pb, "bn2", c_out)?)
                },
            })
        })?;
        blocks.push(block);
    }
    Ok(Decoder {
        spec: spec.clone(),
        fc,
        blocks,
        calls: Arc::new(AtomicUsize::new(0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn small(size: usize, channels: usize) -> EncoderSpec {
        EncoderSpec {
            base_channels: 4,
            ..EncoderSpec::new(size, channels, 3)
        }
    }

    #[test]
    fn feature_plane_is_eight_for_both_sizes() {
        for (size, blocks) in [(32, 3), (64, 4)] {
            let spec = small(size, 1);
            let mut pb = ParamBuilder::new(0, DType::F32);
            let trunk = ConvTrunk::new(&spec, &mut pb).unwrap();
            assert_eq!(trunk.depth(), blocks);
            let x = Tensor::zeros((2, 1, size, size), DType::F32, &Device::Cpu).unwrap();
            let fm = trunk.feature_map(&x, &mut Pass::eval()).unwrap();
            assert_eq!(fm.dims(), &[2, spec.feature_channels(), 8, 8]);
        }
    }

    #[test]
    fn default_channels_and_unsupported_sizes() {
        let spec = EncoderSpec::new(64, 3, 10);
        assert_eq!(spec.block_channels(), vec![16, 32, 64, 128]);
        assert_eq!(spec.strides(), vec![2, 2, 2, 1]);
        assert_eq!(EncoderSpec::new(32, 1, 10).strides(), vec![2, 2, 1]);
        let mut pb = ParamBuilder::new(0, DType::F32);
        assert!(build_encoder(&EncoderSpec::new(28, 1, 10), &mut pb).is_err());
    }

    #[test]
    fn decoder_mirrors_encoder() {
        for (size, ch) in [(32, 1), (64, 3)] {
            let spec = small(size, ch);
            let mut pb = ParamBuilder::new(1, DType::F32);
            let enc = build_encoder(&spec, &mut pb).unwrap();
            let dec = build_decoder(&spec, &mut pb).unwrap();
            assert_eq!(dec.depth(), enc.trunk().depth());
            let x = Tensor::rand(0f32, 1.0, (2, ch, size, size), &Device::Cpu).unwrap();
            let post = enc.forward(&x, &mut Pass::eval()).unwrap();
            assert_eq!(post.mean.dims(), &[2, 3]);
            let y = dec.forward(&post.mean, &mut Pass::eval()).unwrap();
            assert_eq!(y.dims(), x.dims());
            let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn zero_latent_decodes_deterministically() {
        let spec = small(32, 1);
        let mut pb = ParamBuilder::new(2, DType::F32);
        let dec = build_decoder(&spec, &mut pb).unwrap();
        let z = Tensor::zeros((1, 3), DType::F32, &Device::Cpu).unwrap();
        let a = dec.forward(&z, &mut Pass::eval()).unwrap();
        let b = dec.forward(&z, &mut Pass::eval()).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert_eq!(dec.calls(), 2);
        let wrong = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(dec.forward(&wrong, &mut Pass::eval()).is_err());
    }

    #[test]
    fn parameter_count_is_stable() {
        let count = || {
            let mut pb = ParamBuilder::new(9, DType::F32);
            build_encoder(&EncoderSpec::new(32, 1, 10), &mut pb).unwrap();
            pb.finish().num_params()
        };
        assert_eq!(count(), count());
    }
}
