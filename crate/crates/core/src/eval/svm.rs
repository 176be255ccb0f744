//! Linear support-vector classifier, one-vs-rest, trained by dual coordinate descent
//! on the hinge loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SvmOptions {
    pub c: f64,
    /// Stop once the projected-gradient spread of an epoch falls below this.
    pub tol: f64,
    pub max_epochs: usize,
    /// Append a constant feature so the (regularized) bias is learned with `w`.
    pub bias: bool,
    pub standardize: bool,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-3,
            max_epochs: 1000,
            bias: true,
            standardize: true,
        }
    }
}

/// Binary hinge-loss SVM weights for `y ∈ {−1, +1}` over rows of `x: (n, d)`.
pub fn train_binary<R: Rng + ?Sized>(
    x: &[f64],
    d: usize,
    y: &[f64],
    opts: &SvmOptions,
    rng: &mut R,
) -> Vec<f64> {
    let n = y.len();
    let mut w = vec![0.0; d];
    let mut alpha = vec![0.0; n];
    let qdiag: Vec<f64> = x.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..opts.max_epochs {
        order.shuffle(rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            if qdiag[i] <= 0.0 {
                continue;
            }
            let row = &x[i * d..(i + 1) * d];
            let g = y[i] * row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= opts.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qdiag[i]).clamp(0.0, opts.c);
                let step = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(row) {
                    *wj += step * xj;
                }
            }
        }
        if pg_max - pg_min < opts.tol {
            break;
        }
    }
    w
}

/// Per-feature standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], d: usize) -> Self {
        let n = (x.len() / d).max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in x.chunks(d) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in x.chunks(d) {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        x.chunks(d)
            .flat_map(|r| (0..d).map(move |j| (r[j] - self.mean[j]) / self.scale[j]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvc {
    pub classes: Vec<u32>,
    /// One weight row per class, length `d` (+1 with bias).
    pub weights: Vec<Vec<f64>>,
    pub scaler: Option<Standardizer>,
    pub bias: bool,
    pub d: usize,
}

impl LinearSvc {
    pub fn fit<R: Rng + ?Sized>(
        x: &[f64],
        d: usize,
        labels: &[u32],
        opts: &SvmOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || labels.is_empty() || x.len() != labels.len() * d {
            return Err(Error::shape("classifier input must be (n, d) with n labels"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier input".into()));
        }
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        let scaler = opts.standardize.then(|| Standardizer::fit(x, d));
        let design = Self::design(scaler.as_ref(), opts.bias, x, d);
        let width = d + opts.bias as usize;
        let weights = if classes.len() == 2 {
            let y: Vec<f64> = labels.iter().map(|&l| if l == classes[1] { 1.0 } else { -1.0 }).collect();
            let w = train_binary(&design, width, &y, opts, rng);
            vec![w.iter().map(|v| -v).collect(), w]
        } else {
            classes
                .iter()
                .map(|&k| {
                    let y: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
                    train_binary(&design, width, &y, opts, rng)
                })
                .collect()
        };
        Ok(Self {
            classes,
            weights,
            scaler,
            bias: opts.bias,
            d,
        })
    }

    fn design(scaler: Option<&Standardizer>, bias: bool, x: &[f64], d: usize) -> Vec<f64> {
        let x = match scaler {
            Some(s) => s.apply(x),
            None => x.to_vec(),
        };
        if !bias {
            return x;
        }
        x.chunks(d).flat_map(|r| r.iter().copied().chain([1.0])).collect()
    }

    /// Per-class decision values, `(n, classes)` row-major.
    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        let width = self.d + self.bias as usize;
        let design = Self::design(self.scaler.as_ref(), self.bias, x, self.d);
        design
            .chunks(width)
            .flat_map(|r| {
                self.weights
                    .iter()
                    .map(move |w| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<u32> {
        let k = self.classes.len();
        self.decision(x)
            .chunks(k)
            .map(|scores| {
                let best = scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, &s)| if s > acc.1 { (j, s) } else { acc });
                self.classes[best.0]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn separable_binary_problem() {
        let x = vec![-2.0, 0.3, -1.5, -0.2, -3.0, 1.0, 2.0, -0.4, 1.2, 0.9, 2.5, 0.0];
        let y = vec![0, 0, 0, 1, 1, 1];
        let svc = LinearSvc::fit(&x, 2, &y, &SvmOptions::default(), &mut seeded(3, 0)).unwrap();
        assert_eq!(svc.predict(&x), y);
    }

    #[test]
    fn margin_constraints_hold_at_optimum() {
        // hard-margin limit: with large C every training point ends up with y·f(x) ≥ 1 − tol
        let x = vec![0.0, 0.0, 1.0, 1.0, 4.0, 4.0, 5.0, 5.0];
        let y = vec![-1.0, -1.0, 1.0, 1.0];
        let design: Vec<f64> = x.chunks(2).flat_map(|r| [r[0], r[1], 1.0]).collect();
        let opts = SvmOptions { c: 1e6, tol: 1e-9, max_epochs: 100_000, ..SvmOptions::default() };
        let w = train_binary(&design, 3, &y, &opts, &mut seeded(1, 0));
        for (r, yi) in design.chunks(3).zip(&y) {
            let f: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!(yi * f >= 1.0 - 1e-6, "{f}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(LinearSvc::fit(&[1.0, 2.0], 1, &[3, 3], &SvmOptions::default(), &mut seeded(1, 0)).is_err());
    }
}
