//! Elementwise and normalisation ops with hand-written backward passes.
//!
//! The backend differentiates these through several broadcast and comparison
//! kernels whose backward passes dominate a training step on CPU.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use super::im2col::{host, slice3};
use crate::error::Result;

fn unsupported(op: &str) -> candle_core::Error {
    candle_core::Error::Msg(format!("{op} supports f32 and f64"))
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => Err(candle_core::Error::Msg("fused op expects a contiguous input".into())),
    }
}

fn map_storage(
    op: &str,
    s: &CpuStorage,
    l: &Layout,
    f32_fn: impl Fn(&[f32]) -> Vec<f32>,
    f64_fn: impl Fn(&[f64]) -> Vec<f64>,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let out = match s {
        CpuStorage::F32(_) => CpuStorage::F32(f32_fn(contiguous(s, l)?)),
        CpuStorage::F64(_) => CpuStorage::F64(f64_fn(contiguous(s, l)?)),
        _ => return Err(unsupported(op)),
    };
    Ok((out, l.shape().clone()))
}

struct Relu;

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "fused-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(
            "relu",
            s,
            l,
            |x| x.iter().map(|&v| v.max(0.0)).collect(),
            |x| x.iter().map(|&v| v.max(0.0)).collect(),
        )
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        fn go<T: WithDType>(res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
            let (y, g) = (host::<T>(res)?, host::<T>(grad)?);
            let dx: Vec<T> = y.iter().zip(&g).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect();
            Tensor::from_vec(dx, res.shape(), res.device())
        }
        Ok(Some(match res.dtype() {
            DType::F32 => go::<f32>(res, grad)?,
            DType::F64 => go::<f64>(res, grad)?,
            _ => return Err(unsupported("relu")),
        }))
    }
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "fused-sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(
            "sigmoid",
            s,
            l,
            |x| x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            |x| x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        )
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        fn go<T: WithDType>(res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
            let (y, g) = (host::<T>(res)?, host::<T>(grad)?);
            let dx: Vec<T> = y.iter().zip(&g).map(|(&y, &g)| g * y * (T::one() - y)).collect();
            Tensor::from_vec(dx, res.shape(), res.device())
        }
        Ok(Some(match res.dtype() {
            DType::F32 => go::<f32>(res, grad)?,
            DType::F64 => go::<f64>(res, grad)?,
            _ => return Err(unsupported("sigmoid")),
        }))
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Relu)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

/// Per-channel mean and biased variance of a contiguous `(B, C, H, W)` tensor.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    fn go<T: WithDType>(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (b, c, h, w) = x.dims4()?;
        let data = host::<T>(x)?;
        let plane = h * w;
        let count = (b * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let data = &data;
            let planes = || (0..b).map(move |bi| &data[(bi * c + ch) * plane..(bi * c + ch + 1) * plane]);
            let m = planes().flatten().map(|v| v.to_f64()).sum::<f64>() / count;
            let v = planes().flatten().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>() / count;
            mean[ch] = m;
            var[ch] = v;
        }
        Ok((mean, var))
    }
    match x.dtype() {
        DType::F32 => go::<f32>(x),
        DType::F64 => go::<f64>(x),
        _ => Err(unsupported("batch norm").into()),
    }
}

/// `γ·(x − mean)·inv_std + β` per channel. With `batch_stats` the statistics are
/// treated as functions of `x` in the backward pass.
struct BatchNorm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], plane: usize) -> Vec<T> {
        let c = self.mean.len();
        let mut y = vec![T::zero(); x.len()];
        for (k, (src, dst)) in x.chunks(plane).zip(y.chunks_mut(plane)).enumerate() {
            let ch = k % c;
            let scale = gamma[ch].to_f64() * self.inv_std[ch];
            let shift = beta[ch].to_f64() - self.mean[ch] * scale;
            let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        }
        y
    }

    fn backward<T: WithDType>(&self, x: &[T], gamma: &[T], g: &[T], plane: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let c = self.mean.len();
        let count = (x.len() / c) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (k, (xs, gs)) in x.chunks(plane).zip(g.chunks(plane)).enumerate() {
            let ch = k % c;
            let (m, s) = (self.mean[ch], self.inv_std[ch]);
            for (&xv, &gv) in xs.iter().zip(gs) {
                let gv = gv.to_f64();
                sum_g[ch] += gv;
                sum_gx[ch] += gv * (xv.to_f64() - m) * s;
            }
        }
        let mut dx = vec![T::zero(); x.len()];
        for (k, ((xs, gs), ds)) in x.chunks(plane).zip(g.chunks(plane)).zip(dx.chunks_mut(plane)).enumerate() {
            let ch = k % c;
            let (m, s) = (self.mean[ch], self.inv_std[ch]);
            let scale = gamma[ch].to_f64() * s;
            if self.batch_stats {
                let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                for ((&xv, &gv), d) in xs.iter().zip(gs).zip(ds.iter_mut()) {
                    let xhat = (xv.to_f64() - m) * s;
                    *d = T::from_f64(scale * (gv.to_f64() - mg - xhat * mgx));
                }
            } else {
                let scale = T::from_f64(scale);
                for (&gv, d) in gs.iter().zip(ds.iter_mut()) {
                    *d = gv * scale;
                }
            }
        }
        let dgamma = sum_gx.into_iter().map(T::from_f64).collect();
        let dbeta = sum_g.into_iter().map(T::from_f64).collect();
        (dx, dgamma, dbeta)
    }
}

impl CustomOp3 for BatchNorm {
    fn name(&self) -> &'static str {
        "fused-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, _, h, w) = l1.shape().dims4()?;
        let parts = [(s1, l1), (s2, l2), (s3, l3)];
        let out = match s1 {
            CpuStorage::F32(_) => {
                let [x, g, b] = slice3::<f32>(parts)?;
                CpuStorage::F32(self.forward(x, g, b, h * w))
            }
            CpuStorage::F64(_) => {
                let [x, g, b] = slice3::<f64>(parts)?;
                CpuStorage::F64(self.forward(x, g, b, h * w))
            }
            _ => return Err(unsupported("batch norm")),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, w) = x.dims4()?;
        let dev = x.device();
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => {
                let (dx, dg, db) = self.backward::<f32>(&host(x)?, &host(gamma)?, &host(grad)?, h * w);
                (Tensor::new(dx, dev)?, Tensor::new(dg, dev)?, Tensor::new(db, dev)?)
            }
            DType::F64 => {
                let (dx, dg, db) = self.backward::<f64>(&host(x)?, &host(gamma)?, &host(grad)?, h * w);
                (Tensor::new(dx, dev)?, Tensor::new(dg, dev)?, Tensor::new(db, dev)?)
            }
            _ => return Err(unsupported("batch norm")),
        };
        Ok((
            Some(dx.reshape(x.shape())?),
            Some(dg.reshape(gamma.shape())?),
            Some(db.reshape(beta.shape())?),
        ))
    }
}

/// Per-channel affine normalisation of `(B, C, H, W)` with the given statistics.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: Vec<f64>,
    var: &[f64],
    eps: f64,
    batch_stats: bool,
) -> Result<Tensor> {
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let op = BatchNorm {
        mean,
        inv_std,
        batch_stats,
    };
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::rng::seeded(seed, 0);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn relu_and_sigmoid_match_backend() {
        let x = Var::from_tensor(&randn(&[3, 7], 1)).unwrap();
        let probe = randn(&[3, 7], 2);
        for (ours, theirs) in [
            (relu(&x).unwrap(), x.relu().unwrap()),
            (sigmoid(&x).unwrap(), (x.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap()),
        ] {
            assert!(max_diff(&ours, &theirs) < 1e-14);
            let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-14);
        }
    }

    /// Batch norm composed from backend primitives.
    fn composed(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let c = x.dims()[1];
        let shape = (1, c, 1, 1);
        let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let centered = x.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        centered
            .broadcast_div(&(var + eps).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.reshape(shape).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape(shape).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        let x = Var::from_tensor(&randn(&[4, 3, 5, 5], 3)).unwrap();
        let gamma = Var::from_tensor(&(randn(&[3], 4) + 1.5).unwrap()).unwrap();
        let beta = Var::from_tensor(&randn(&[3], 5)).unwrap();
        let probe = randn(&[4, 3, 5, 5], 6);
        let (mean, var) = channel_stats(&x).unwrap();
        let ours = batch_norm(&x, &gamma, &beta, mean, &var, 1e-5, true).unwrap();
        let theirs = composed(&x, &gamma, &beta, 1e-5);
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn fixed_statistics_give_an_affine_map() {
        let x = Var::from_tensor(&randn(&[2, 2, 3, 3], 7)).unwrap();
        let gamma = Tensor::new(&[2.0f64, -1.0], &Device::Cpu).unwrap();
        let beta = Tensor::new(&[0.5f64, 0.0], &Device::Cpu).unwrap();
        let y = batch_norm(&x, &gamma, &beta, vec![0.0, 1.0], &[4.0, 1.0], 0.0, false).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // channel 0 scales by 2/2, channel 1 by −1/1
        assert!(gx[..9].iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(gx[9..18].iter().all(|&v| (v + 1.0).abs() < 1e-15));
        let first = y.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let x0 = x.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((first - (x0 + 0.5)).abs() < 1e-15);
    }
}
