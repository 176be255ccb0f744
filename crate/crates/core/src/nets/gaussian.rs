//! Diagonal Gaussian posteriors, the reparameterisation trick and KL to N(0, I).

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Clamp applied to predicted log-variances so `exp(½·logvar)` stays finite.
pub const LOGVAR_LIMIT: f64 = 10.0;

/// Batched diagonal Gaussian: `mean` and `logvar` are both `(batch, dim)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        if mean.dims() != logvar.dims() {
            return Err(Error::shape(format!(
                "posterior mean {:?} vs logvar {:?}",
                mean.dims(),
                logvar.dims()
            )));
        }
        if mean.rank() != 2 {
            return Err(Error::shape("posterior parameters must be (batch, dim)"));
        }
        Ok(Self { mean, logvar })
    }

    /// Splits a `(batch, 2·dim)` head output into `(mean, clamped logvar)`.
    pub fn from_head(out: &Tensor) -> Result<Self> {
        let (_, two_d) = out.dims2()?;
        if two_d % 2 != 0 {
            return Err(Error::shape("gaussian head output width must be even"));
        }
        let d = two_d / 2;
        let mean = out.narrow(1, 0, d)?;
        let logvar = out.narrow(1, d, d)?.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        Self::new(mean, logvar)
    }

    pub fn batch(&self) -> usize {
        self.mean.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.dims()[1]
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            logvar: self.logvar.detach(),
        }
    }

    /// `log N(x; mean, diag exp(logvar))` summed over dims, per row.
    pub fn log_density(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != self.mean.dims() {
            return Err(Error::shape("log-density sample does not match the posterior"));
        }
        let sq = (x - &self.mean)?.sqr()?;
        let inv_var = self.logvar.neg()?.exp()?;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let per_dim = ((sq * inv_var)? + &self.logvar)?.affine(-0.5, -0.5 * ln_2pi)?;
        Ok(per_dim.sum(D::Minus1)?)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in [("mean", &self.mean), ("logvar", &self.logvar)] {
            let bad = t
                .flatten_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1::<f64>()?
                .iter()
                .any(|v| v.is_nan());
            if bad {
                return Err(Error::NonFinite(format!("posterior {name} contains NaN")));
            }
        }
        Ok(())
    }
}

/// `mean + exp(½·logvar) ⊙ noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.dims() != post.mean.dims() {
        return Err(Error::shape(format!(
            "noise {:?} does not match posterior {:?}",
            noise.dims(),
            post.mean.dims()
        )));
    }
    Ok((&post.mean + (post.std()? * noise)?)?)
}

/// Per-row `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ_j (μ_j² + σ_j² − 1 − log σ_j²)`.
pub fn kl_per_sample(post: &GaussianPosterior) -> Result<Tensor> {
    let terms = ((post.mean.sqr()? + post.logvar.exp()?)? - &post.logvar)?;
    Ok(terms.affine(0.5, -0.5)?.sum(D::Minus1)?)
}

/// Batch-mean KL divergence to the standard normal prior, in nats.
pub fn kl_diag_gaussian(post: &GaussianPosterior) -> Result<Tensor> {
    post.check_finite()?;
    Ok(kl_per_sample(post)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn post(mean: &[f64], logvar: &[f64]) -> GaussianPosterior {
        let d = mean.len();
        GaussianPosterior::new(
            Tensor::from_slice(mean, (1, d), &Device::Cpu).unwrap(),
            Tensor::from_slice(logvar, (1, d), &Device::Cpu).unwrap(),
        )
        .unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn reparameterize_examples() {
        let p = post(&[1.0], &[(4.0f64).ln()]);
        let eps = Tensor::from_slice(&[0.5f64], (1, 1), &Device::Cpu).unwrap();
        assert!((scalar(reparameterize(&p, &eps).unwrap()) - 2.0).abs() < 1e-12);
        let zero = Tensor::zeros((1, 1), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(reparameterize(&p, &zero).unwrap()), 1.0);
        let collapsed = post(&[0.3], &[f64::NEG_INFINITY]);
        assert_eq!(scalar(reparameterize(&collapsed, &eps).unwrap()), 0.3);
        let wrong = Tensor::zeros((1, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(reparameterize(&p, &wrong).is_err());
    }

    #[test]
    fn reparameterize_is_linear_in_noise() {
        let p = post(&[0.2, -1.0], &[0.3, -0.7]);
        let e1 = Tensor::from_slice(&[0.4f64, -1.2], (1, 2), &Device::Cpu).unwrap();
        let e2 = Tensor::from_slice(&[-0.9f64, 0.25], (1, 2), &Device::Cpu).unwrap();
        let lhs = reparameterize(&p, &((&e1 * 2.0).unwrap() + &e2).unwrap()).unwrap();
        let a = reparameterize(&p, &e1).unwrap();
        let b = reparameterize(&p, &e2).unwrap();
        // z(2e1 + e2) = 2 z(e1) + z(e2) − 2 μ
        let rhs = (((a * 2.0).unwrap() + b).unwrap() - (&p.mean * 2.0).unwrap()).unwrap();
        let diff = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(scalar(kl_diag_gaussian(&post(&[0.0, 0.0], &[0.0, 0.0])).unwrap()), 0.0);
        assert!((scalar(kl_diag_gaussian(&post(&[1.0], &[0.0])).unwrap()) - 0.5).abs() < 1e-12);
        let e = std::f64::consts::E;
        let kl = scalar(kl_diag_gaussian(&post(&[0.0], &[1.0])).unwrap());
        assert!((kl - (e - 2.0) / 2.0).abs() < 1e-12);
        assert!((kl - 0.3591).abs() < 1e-4);
        assert!(kl_diag_gaussian(&post(&[f64::NAN], &[0.0])).is_err());
    }

    #[test]
    fn log_density_matches_formula() {
        let p = post(&[0.5], &[(2.0f64).ln()]);
        let x = Tensor::from_slice(&[1.5f64], (1, 1), &Device::Cpu).unwrap();
        let got = scalar(p.log_density(&x).unwrap());
        let want = -0.5 * ((1.0 / 2.0) + 2f64.ln() + (2.0 * std::f64::consts::PI).ln());
        assert!((got - want).abs() < 1e-12);
    }
}
