//! Parameter registry and the primitive layers every network in the crate is built from.
//!
//! Parameters are initialised from a seeded ChaCha stream rather than the tensor
//! backend's RNG so that model construction is reproducible bit for bit.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{fused, im2col};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Named trainable parameters plus non-trainable buffers (batch-norm statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn subset(&self, prefix: &str) -> ParamSet {
        let keep = |list: &[(String, Var)]| {
            list.iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect()
        };
        ParamSet {
            params: keep(&self.params),
            buffers: keep(&self.buffers),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn all(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter().chain(&self.buffers)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.all().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// SHA-256 over names, shapes and raw values of every parameter and buffer.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.all() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let t = var.as_tensor().flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    for v in t.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates parameters under a dotted name scope.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    scope: Vec<String>,
    set: ParamSet,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: seeded(seed, crate::rng::stream::INIT),
            dtype,
            device: Device::Cpu,
            scope: Vec::new(),
            set: ParamSet::default(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn tensor(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let var = Var::from_tensor(&self.tensor(values, shape)?)?;
        self.set.params.push((self.full_name(name), var.clone()));
        Ok(var)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        self.set.params.push((self.full_name(name), var.clone()));
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        self.set.buffers.push((self.full_name(name), var.clone()));
        Ok(var)
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// Forward-pass behaviour of the stochastic layers.
pub struct Pass<'r> {
    /// Batch-norm uses (and updates) batch statistics when true, running statistics otherwise.
    pub batch_stats: bool,
    dropout: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Pass<'r> {
    /// Inference: running statistics, no dropout.
    pub fn eval() -> Self {
        Self {
            batch_stats: false,
            dropout: None,
        }
    }

    pub fn train(dropout_rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            batch_stats: true,
            dropout: Some(dropout_rng),
        }
    }

    /// Batch statistics without dropout.
    pub fn train_no_dropout() -> Self {
        Self {
            batch_stats: true,
            dropout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => fused::relu(x)?,
            Activation::Tanh => x.tanh()?,
            Activation::Elu => x.elu(1.0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let bound = 1.0 / (in_dim as f64).sqrt();
            Ok(Self {
                weight: pb.uniform("weight", &[out_dim, in_dim], bound)?,
                bias: pb.uniform("bias", &[out_dim], bound)?,
            })
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        // bias as a rank-one product: its backward is a matmul rather than a
        // strided reduction over the batch, which is far slower on CPU
        let n = y.dims()[0];
        let ones = Tensor::ones((n, 1), y.dtype(), y.device())?;
        let bias = self.bias.as_tensor().reshape((1, self.out_dim()))?;
        Ok((y + ones.matmul(&bias)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
            Ok(Self {
                weight: pb.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?,
                bias: pb.uniform("bias", &[out_ch], bound)?,
                stride,
                padding,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        im2col::conv2d(
            x,
            self.weight.as_tensor(),
            Some(self.bias.as_tensor()),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
            Ok(Self {
                weight: pb.uniform("weight", &[in_ch, out_ch, kernel, kernel], bound)?,
                bias: pb.uniform("bias", &[out_ch], bound)?,
                stride,
                padding,
                // exact ×stride upsampling for odd kernels with `padding = kernel / 2`
                output_padding: stride - 1,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        im2col::conv_transpose2d(
            x,
            self.weight.as_tensor(),
            Some(self.bias.as_tensor()),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                gamma: pb.constant("weight", &[channels], 1.0)?,
                beta: pb.constant("bias", &[channels], 0.0)?,
                running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
                running_var: pb.buffer("running_var", &[channels], 1.0)?,
                momentum: 0.1,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, pass: &Pass<'_>) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let (mean, var) = if pass.batch_stats {
            let (mean, var) = fused::channel_stats(x)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let blend = |running: &Var, batch: &[f64], scale: f64| -> Result<()> {
                let old = running.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
                let new: Vec<f64> = old.iter().zip(batch).map(|(o, b)| (1.0 - m) * o + m * scale * b).collect();
                running.set(&Tensor::new(new, running.device())?.to_dtype(running.dtype())?)?;
                Ok(())
            };
            blend(&self.running_mean, &mean, 1.0)?;
            blend(&self.running_var, &var, unbiased)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
                self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
            )
        };
        fused::batch_norm(
            x,
            self.gamma.as_tensor(),
            self.beta.as_tensor(),
            mean,
            &var,
            self.eps,
            pass.batch_stats,
        )
    }
}

/// Inverted dropout; a no-op unless the pass carries a dropout RNG.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub fn forward(&self, x: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor> {
        let Some(rng) = pass.dropout.as_deref_mut() else {
            return Ok(x.clone());
        };
        if self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    (1.0 / keep) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Row-wise `log Σ exp` over the last dimension, stable for large inputs.
pub fn logsumexp(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.add(&max)?.squeeze(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_deterministic() {
        let build = || {
            let mut pb = ParamBuilder::new(5, DType::F32);
            Conv2d::new(&mut pb, "c", 3, 4, 3, 2, 1).unwrap();
            Linear::new(&mut pb, "l", 4, 2).unwrap();
            pb.finish()
        };
        let (a, b) = (build(), build());
        assert_eq!(a.num_params(), 4 * 3 * 9 + 4 + 8 + 2);
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(a.params()[0].0, "c.weight");
    }

    #[test]
    fn conv_shapes() {
        let mut pb = ParamBuilder::new(0, DType::F32);
        let down = Conv2d::new(&mut pb, "d", 1, 2, 3, 2, 1).unwrap();
        let up = ConvTranspose2d::new(&mut pb, "u", 2, 1, 3, 2, 1).unwrap();
        let x = Tensor::zeros((2, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let y = down.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 4, 4]);
        assert_eq!(up.forward(&y).unwrap().dims(), &[2, 1, 8, 8]);
    }

    #[test]
    fn batchnorm_train_normalises_and_updates_running_stats() {
        let mut pb = ParamBuilder::new(0, DType::F64);
        let bn = BatchNorm2d::new(&mut pb, "bn", 1).unwrap();
        let x = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((4, 1, 1, 1))
            .unwrap();
        let y = bn.forward(&x, &Pass::train_no_dropout()).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().sum::<f64>().abs() < 1e-12);
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        // population var 1.25, unbiased 5/3
        let rv = bn.running_var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        // eval uses the running stats and leaves them alone
        let params = pb.finish();
        let before = params.fingerprint().unwrap();
        bn.forward(&x, &Pass::eval()).unwrap();
        assert_eq!(before, params.fingerprint().unwrap());
    }

    #[test]
    fn dropout_only_with_rng() {
        let d = Dropout::new(0.5).unwrap();
        let x = Tensor::ones((1000,), DType::F32, &Device::Cpu).unwrap();
        let same = d.forward(&x, &mut Pass::eval()).unwrap();
        assert_eq!(same.to_vec1::<f32>().unwrap(), vec![1.0; 1000]);
        let mut rng = seeded(1, 1);
        let dropped = d.forward(&x, &mut Pass::train(&mut rng)).unwrap();
        let v = dropped.to_vec1::<f32>().unwrap();
        let zeros = v.iter().filter(|&&x| x == 0.0).count();
        assert!((400..600).contains(&zeros));
        assert!(v.iter().all(|&x| x == 0.0 || x == 2.0));
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn logsumexp_is_stable() {
        let x = Tensor::new(&[[1000.0f64, 1000.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let v = logsumexp(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((v[1] - 2f64.ln()).abs() < 1e-12);
    }
}
