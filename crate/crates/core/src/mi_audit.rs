//! Residual-redundancy audit: MINE estimates of I(c; s^i).

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disentangle::Latents;
use crate::error::{Error, Result};
use crate::nets::layers::{logsumexp, Activation, ParamBuilder};
use crate::nets::mlp::{Mlp, MlpSpec};
use crate::rng::{derive_seed, seeded, stream};
use crate::train;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineConfig {
    /// Hidden widths of the statistic network; input width is `d_c + d_s`.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Moving-average correction of the log-partition gradient.
    #[serde(default = "yes")]
    pub ema: bool,
    #[serde(default = "default_ema_rate")]
    pub ema_rate: f64,
    /// Epochs averaged into each repeat's final value.
    #[serde(default = "default_window")]
    pub final_window: usize,
    /// Z-score every coordinate of `c` and `s` before estimation.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}

fn default_lr() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    128
}

fn default_epochs() -> usize {
    500
}

fn default_repeats() -> usize {
    10
}

fn default_ema_rate() -> f64 {
    0.01
}

fn default_window() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            repeats: default_repeats(),
            ema: true,
            ema_rate: default_ema_rate(),
            final_window: default_window(),
            standardize: true,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "MINE needs repeats >= 1, epochs >= 1 and batch >= 2".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("MINE hidden widths must be non-empty and >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.ema_rate) || self.final_window == 0 {
            return Err(Error::Config("invalid MINE lr, EMA rate or window".into()));
        }
        Ok(())
    }

    pub fn widths(&self, input: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }
}

/// Statistic network `T(c, s)`.
pub fn statistic_net(cfg: &MineConfig, input: usize, seed: u64, dtype: DType) -> Result<(Mlp, crate::nets::ParamSet)> {
    let mut pb = ParamBuilder::new(seed, dtype);
    let spec = MlpSpec {
        widths: cfg.widths(input),
        activation: Activation::Relu,
    };
    let net = pb.scope("t", |pb| Mlp::new(&spec, pb))?;
    Ok((net, pb.finish()))
}

/// Donsker–Varadhan bound `mean(T_joint) − log mean(exp T_marginal)` from the two
/// `(batch, 1)` statistic outputs.
pub fn dv_objective(t_joint: &Tensor, t_marginal: &Tensor) -> Result<Tensor> {
    let n = t_marginal.dims()[0];
    if n == 0 || t_joint.dims()[0] == 0 {
        return Err(Error::invalid("DV objective on an empty batch"));
    }
    let log_mean_exp = (logsumexp(&t_marginal.flatten_all()?.unsqueeze(0)?)?.squeeze(0)?
        - (n as f64).ln())?;
    Ok((t_joint.mean_all()? - log_mean_exp)?)
}

/// Objective of `net` on a joint batch and its marginal counterpart.
pub fn mine_objective(net: &Mlp, joint: &Tensor, marginal: &Tensor) -> Result<Tensor> {
    dv_objective(&net.forward(joint)?, &net.forward(marginal)?)
}

/// Uniform random cyclic permutation (Sattolo); no element stays in place when `n ≥ 2`.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineResult {
    /// Mean over repeats of each repeat's final value.
    pub estimate: f64,
    pub per_repeat: Vec<f64>,
    /// Population standard deviation across repeats.
    pub std: f64,
    /// Per-repeat epoch-mean DV objective.
    pub curves: Vec<Vec<f64>>,
    pub restarts: usize,
}

fn standardized(values: &[f32], n: usize, d: usize) -> Vec<f32> {
    let mut out = values.to_vec();
    for j in 0..d {
        let col = (0..n).map(|i| values[i * d + j] as f64);
        let mean = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            out[i * d + j] = ((values[i * d + j] as f64 - mean) / sd) as f32;
        }
    }
    out
}

fn gather_rows(values: &[f32], d: usize, rows: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&values[r * d..(r + 1) * d]);
    }
    out
}

/// One repeat. `Ok(None)` means the objective went non-finite.
fn mine_repeat(
    c: &[f32],
    s: &[f32],
    n: usize,
    dc: usize,
    ds: usize,
    cfg: &MineConfig,
    seed: u64,
) -> Result<Option<(f64, Vec<f64>)>> {
    let (net, params) = statistic_net(cfg, dc + ds, seed, DType::F32)?;
    let mut opt = train::adam(params.vars(), cfg.lr)?;
    let mut rng = seeded(seed, stream::MINE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut running: Option<f64> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let dev = Device::Cpu;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let b = rows.len();
            if b < 2 {
                continue;
            }
            let perm = derangement(b, &mut rng);
            let shuffled: Vec<usize> = perm.iter().map(|&k| rows[k]).collect();
            let cb = Tensor::from_vec(gather_rows(c, dc, rows), (b, dc), &dev)?;
            let sb = Tensor::from_vec(gather_rows(s, ds, rows), (b, ds), &dev)?;
            let sm = Tensor::from_vec(gather_rows(s, ds, &shuffled), (b, ds), &dev)?;
            let both = Tensor::cat(
                &[&Tensor::cat(&[&cb, &sb], 1)?, &Tensor::cat(&[&cb, &sm], 1)?],
                0,
            )?;
            let t_both = net.forward(&both)?;
            let t_joint = t_both.narrow(0, 0, b)?;
            let t_marg = t_both.narrow(0, b, b)?;
            let objective = dv_objective(&t_joint, &t_marg)?;
            let value = train::scalar(&objective)?;
            if !value.is_finite() {
                return Ok(None);
            }
            let loss = if cfg.ema {
                // value of the log term, gradient E[e^T ∇T] / moving average of E[e^T]
                let exp_t = t_marg.exp()?.mean_all()?;
                let current = train::scalar(&exp_t)?;
                let avg = match running {
                    None => current,
                    Some(r) => (1.0 - cfg.ema_rate) * r + cfg.ema_rate * current,
                };
                running = Some(avg);
                if !avg.is_finite() || avg <= 0.0 {
                    return Ok(None);
                }
                let surrogate = (&exp_t / avg)?;
                let log_term = (t_joint.mean_all()? - &objective)?.detach();
                let second = ((log_term + &surrogate)? - surrogate.detach())?;
                (second - t_joint.mean_all()?)?
            } else {
                objective.neg()?
            };
            train::step(&mut opt, &loss)?;
            epoch_sum += value;
            epoch_batches += 1;
        }
        if epoch_batches == 0 {
            return Err(Error::invalid("MINE needs batches of at least 2 samples"));
        }
        curve.push(epoch_sum / epoch_batches as f64);
    }
    let window = cfg.final_window.min(curve.len());
    let tail = &curve[curve.len() - window..];
    Ok(Some((tail.iter().sum::<f64>() / window as f64, curve)))
}

/// MINE estimate of I(c; s) from row-aligned samples `c: (n, dc)`, `s: (n, ds)`.
pub fn mine_estimate(
    c: &[f32],
    s: &[f32],
    n: usize,
    cfg: &MineConfig,
    seed: u64,
) -> Result<MineResult> {
    cfg.validate()?;
    if n < 2 * cfg.batch_size {
        return Err(Error::invalid(format!(
            "MINE needs at least {} samples, got {n}",
            2 * cfg.batch_size
        )));
    }
    if c.len() % n != 0 || s.len() % n != 0 || c.is_empty() || s.is_empty() {
        return Err(Error::shape("c and s must each hold n rows"));
    }
    let (dc, ds) = (c.len() / n, s.len() / n);
    if c.iter().chain(s).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MINE inputs contain non-finite values".into()));
    }
    let (c, s) = if cfg.standardize {
        (standardized(c, n, dc), standardized(s, n, ds))
    } else {
        (c.to_vec(), s.to_vec())
    };
    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    let mut curves = Vec::with_capacity(cfg.repeats);
    let mut restarts = 0;
    for r in 0..cfg.repeats {
        let mut attempt = 0u64;
        loop {
            let rs = derive_seed(seed, (r as u64) << 8 | attempt);
            match mine_repeat(&c, &s, n, dc, ds, cfg, rs)? {
                Some((value, curve)) => {
                    per_repeat.push(value);
                    curves.push(curve);
                    break;
                }
                None if attempt < 3 => {
                    log::warn!("MINE repeat {r} diverged; restarting with a new seed");
                    attempt += 1;
                    restarts += 1;
                }
                None => {
                    return Err(Error::NonFinite(format!(
                        "MINE repeat {r} diverged after 3 restarts"
                    )))
                }
            }
        }
    }
    let (estimate, var) = mean_var(&per_repeat);
    Ok(MineResult {
        estimate,
        per_repeat,
        std: var.sqrt(),
        curves,
        restarts,
    })
}

/// Arithmetic mean and population variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    /// 1-based view index.
    pub view: usize,
    pub mi_nats: f64,
    pub std: f64,
    pub per_repeat: Vec<f64>,
}

/// One MINE estimate of I(c; s^i) per view.
pub fn audit_redundancy(latents: &Latents, cfg: &MineConfig, seed: u64) -> Result<Vec<AuditRow>> {
    latents.validate()?;
    let n = latents.len();
    if n < 2 * cfg.batch_size {
        return Err(Error::invalid(format!(
            "audit needs at least {} samples, latents hold {n}",
            2 * cfg.batch_size
        )));
    }
    latents
        .s
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = mine_estimate(&latents.c, s, n, cfg, derive_seed(seed, i as u64))?;
            Ok(AuditRow {
                view: i + 1,
                mi_nats: r.estimate,
                std: r.std,
                per_repeat: r.per_repeat,
            })
        })
        .collect()
}

/// Mean of the per-view MI estimates.
pub fn mean_mi(rows: &[AuditRow]) -> f64 {
    mean_var(&rows.iter().map(|r| r.mi_nats).collect::<Vec<_>>()).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_statistic_gives_zero() {
        let t = Tensor::full(1.7f64, (5, 1), &Device::Cpu).unwrap();
        let v = train::scalar(&dv_objective(&t, &t).unwrap()).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let j = Tensor::new(&[[0.3f64], [1.2], [-0.4]], &Device::Cpu).unwrap();
        let m = Tensor::new(&[[0.1f64], [-2.0], [0.9]], &Device::Cpu).unwrap();
        let a = train::scalar(&dv_objective(&j, &m).unwrap()).unwrap();
        let b = train::scalar(&dv_objective(&(&j + 3.0).unwrap(), &(&m + 3.0).unwrap()).unwrap())
            .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn derangement_moves_everything() {
        let mut rng = seeded(0, 0);
        for n in 2..40 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn repeat_average_is_arithmetic_mean() {
        let mut rng = seeded(3, 0);
        let n = 64;
        let c: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let s: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let cfg = MineConfig {
            hidden: vec![8],
            batch_size: 16,
            epochs: 3,
            repeats: 4,
            final_window: 2,
            ..MineConfig::default()
        };
        let r = mine_estimate(&c, &s, n, &cfg, 1).unwrap();
        assert_eq!(r.per_repeat.len(), 4);
        let mean = r.per_repeat.iter().sum::<f64>() / 4.0;
        assert!((r.estimate - mean).abs() < 1e-12);
        for (curve, value) in r.curves.iter().zip(&r.per_repeat) {
            assert!((value - (curve[1] + curve[2]) / 2.0).abs() < 1e-12);
        }
        assert!(mine_estimate(&c[..40], &s[..40], 20, &cfg, 1).is_err());
    }
}
