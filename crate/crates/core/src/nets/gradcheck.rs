//! Central-difference gradient checking for scalar losses built on `Var`s.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Initial finite-difference step.
    pub step: f64,
    /// Estimates at `h` and `h/2` must agree to this relative tolerance; otherwise
    /// the interval straddles a kink and the step shrinks tenfold, once. Smaller
    /// steps only trade the kink for roundoff in the loss.
    pub agreement: f64,
    /// Coordinates probed per variable; variables with fewer entries are checked exhaustively.
    pub coords_per_var: usize,
    /// Relative errors use `max(|analytic|, |numeric|, floor·max(1, |loss|)·step/h)`
    /// as denominator, `h` being the step actually used. This keeps them independent
    /// of the loss's units, and the floor grows with the roundoff of smaller steps.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            agreement: 5e-5,
            coords_per_var: 8,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because no step gave a stable estimate.
    pub unstable: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `name[index]` of the coordinate with the largest relative error.
    pub worst: String,
}

impl GradCheckReport {
    /// Every compared coordinate within `tol`, with at most a tenth of the probed
    /// coordinates left unstable.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol && self.unstable * 10 <= self.checked + self.unstable
    }
}

fn scalar(loss: &Tensor) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.len() != 1 {
        return Err(Error::shape(format!("loss must be a scalar, got {:?}", loss.dims())));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", v[0])));
    }
    Ok(v[0])
}

fn set_values(var: &Var, values: &[f64]) -> Result<()> {
    let t = Tensor::from_slice(values, var.dims(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares the autograd gradient of `loss` w.r.t. each named variable with
/// central differences. `loss` must be deterministic; variables are restored
/// to their original values before returning.
pub fn finite_diff_check(
    mut loss: impl FnMut() -> Result<Tensor>,
    vars: &[(String, Var)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let l0 = loss()?;
    let floor = opts.floor * scalar(&l0)?.abs().max(1.0);
    let grads = l0.backward()?;
    let mut rng = seeded(opts.seed, 0);
    let mut report = GradCheckReport {
        checked: 0,
        unstable: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
    };
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::invalid(format!(
                "gradient checks need f64 variables, `{name}` is {:?}",
                var.dtype()
            )));
        }
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let coords: Vec<usize> = if n <= opts.coords_per_var {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_var).into_vec()
        };
        let mut probe = original.clone();
        let mut run = || -> Result<()> {
            for &i in &coords {
                let mut central = |h: f64| -> Result<f64> {
                    probe[i] = original[i] + h;
                    set_values(var, &probe)?;
                    let plus = scalar(&loss()?)?;
                    probe[i] = original[i] - h;
                    set_values(var, &probe)?;
                    let minus = scalar(&loss()?)?;
                    probe[i] = original[i];
                    Ok((plus - minus) / (2.0 * h))
                };
                let mut h = opts.step;
                let mut stable = None;
                for _ in 0..2 {
                    let (coarse, fine) = (central(h)?, central(h / 2.0)?);
                    let floor = floor * opts.step / h;
                    if (coarse - fine).abs() <= opts.agreement * coarse.abs().max(fine.abs()).max(floor) {
                        stable = Some((fine, floor));
                        break;
                    }
                    h /= 10.0;
                }
                let Some((numeric, floor)) = stable else {
                    report.unstable += 1;
                    continue;
                };
                let abs = (numeric - analytic[i]).abs();
                let rel = abs / analytic[i].abs().max(numeric.abs()).max(floor);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || report.worst.is_empty() {
                    report.max_rel_error = rel.max(report.max_rel_error);
                    report.worst = format!("{name}[{i}]");
                }
            }
            Ok(())
        };
        let outcome = run();
        set_values(var, &original)?;
        outcome?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_is_exact() {
        let x = Var::from_slice(&[0.3f64, -1.2, 2.0], 3, &Device::Cpu).unwrap();
        let a = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let report = finite_diff_check(
            || Ok(((x.as_tensor() * &a)?.sqr()?.sum_all()? + x.as_tensor().sum_all()?)?),
            &vars,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        // restored afterwards
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), vec![0.3, -1.2, 2.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Var::from_slice(&[1.0f64, 2.0], 2, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        // the detached factor hides half of the true gradient of x²
        let report = finite_diff_check(
            || Ok((x.as_tensor() * x.as_tensor().detach())?.sum_all()?),
            &vars,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nearby_kink_shrinks_the_step() {
        let x = Var::from_slice(&[1e-6f64, -0.5], 2, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let report = finite_diff_check(|| Ok(x.as_tensor().relu()?.sum_all()?), &vars, &GradCheckOptions::default())
            .unwrap();
        assert_eq!((report.checked, report.unstable), (2, 0));
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn relative_error_ignores_loss_units() {
        let x = Var::from_slice(&[1e-4f64, 2.0], 2, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let check = |scale: f64| {
            finite_diff_check(
                || Ok(((x.as_tensor() * x.as_tensor().detach())?.sum_all()? * scale)?),
                &vars,
                &GradCheckOptions::default(),
            )
            .unwrap()
            .max_rel_error
        };
        assert!((check(1.0) - check(1e3)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Var::from_slice(&[-1.0f64], 1, &Device::Cpu).unwrap();
        let vars = vec![("x".to_string(), x.clone())];
        let out = finite_diff_check(
            || Ok(x.as_tensor().log()?.sum_all()?),
            &vars,
            &GradCheckOptions::default(),
        );
        assert!(matches!(out, Err(Error::NonFinite(_))));
    }
}
