//! Shared optimisation plumbing: schedule, optimiser, noise and bookkeeping.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch-level optimiser settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Cosine annealing from `lr` to 0 over `epochs`; constant when false.
    #[serde(default = "yes")]
    pub cosine: bool,
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

fn yes() -> bool {
    true
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            cosine: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine {
            return self.lr;
        }
        cosine_lr(self.lr, epoch, self.epochs)
    }
}

/// `½·base·(1 + cos(π·epoch/epochs))`, stepped once per epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let t = epoch as f64 / epochs.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with PyTorch's update rule; moments are kept in f64.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        let m = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect::<Vec<_>>();
        Self {
            v: m.clone(),
            m,
            vars,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Backpropagates `loss` and updates every variable that received a gradient.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let mut p = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let denom = (v[i] / c2).sqrt() + self.eps;
                p[i] -= self.lr * (m[i] / c1) / denom;
            }
            let t = Tensor::from_vec(p, var.dims(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub fn adam(vars: Vec<Var>, lr: f64) -> Result<Adam> {
    Ok(Adam::new(vars, lr))
}

pub fn step(opt: &mut Adam, loss: &Tensor) -> Result<()> {
    opt.backward_step(loss)
}

pub fn set_lr(opt: &mut Adam, lr: f64) {
    opt.set_lr(lr);
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian_noise<R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    dtype: DType,
) -> Result<Tensor> {
    let values: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Value of a scalar tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Sample-weighted running mean.
#[derive(Debug, Clone, Default)]
pub struct Mean {
    sum: f64,
    weight: f64,
}

impl Mean {
    pub fn add(&mut self, value: f64, weight: usize) {
        self.sum += value * weight as f64;
        self.weight += weight as f64;
    }

    pub fn get(&self) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.sum / self.weight
        }
    }
}

/// Tensor → `(n, d)` row-major f32 values.
pub fn to_rows(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}
