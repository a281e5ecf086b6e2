//! Central finite-difference gradient checking for scalar tensor functions.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::nn;

/// Worst mismatch found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub worst_rel: f64,
    pub worst_at: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backprop gradient of `f` with central differences of step
/// `h`, on up to `per_var` randomly chosen entries of each variable.
///
/// Variables are restored to their original values before returning.
pub fn check(
    vars: &[(String, Var)],
    f: &dyn Fn() -> Result<Tensor>,
    h: f64,
    per_var: usize,
    floor: f64,
    seed: u64,
) -> Result<GradReport> {
    ensure!(!vars.is_empty(), "no variables to check");
    let loss = f()?;
    ensure!(loss.elem_count() == 1, "gradient check needs a scalar function");
    let grads = loss.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        worst_rel: 0.0,
        worst_at: String::new(),
        checked: 0,
    };
    for (name, var) in vars {
        let original = var.as_tensor().copy()?;
        let values = nn::to_f64(&original)?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => nn::to_f64(g)?,
            None => vec![0.0; values.len()],
        };
        let picks = sample(&mut rng, values.len(), per_var.min(values.len()));
        for i in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = values.clone();
                v[i] += delta;
                var.set(&nn::tensor(v, original.dims(), original.dtype(), original.device())?)?;
                nn::scalar(&f()?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let rel = relative_error(analytic[i], numeric, floor);
            report.checked += 1;
            if rel > report.worst_rel || report.worst_at.is_empty() {
                report.worst_rel = rel;
                report.worst_at = format!("{name}[{i}] analytic={:e} numeric={numeric:e}", analytic[i]);
            }
        }
        var.set(&original)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn quadratic_is_exact() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let t = x.as_tensor().clone();
        let r = check(&[("x".into(), x)], &|| Ok(t.sqr()?.sum_all()?), 1e-5, 3, 1e-8, 0).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.worst_rel < 1e-8, "{r:?}");
        assert_eq!(t.dtype(), DType::F64);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        let t = x.as_tensor().clone();
        // detach hides part of the dependence from backprop
        let r = check(
            &[("x".into(), x)],
            &|| Ok((t.sqr()? + t.detach().sqr()?)?.sum_all()?),
            1e-5,
            2,
            1e-8,
            0,
        )
        .unwrap();
        assert!(r.worst_rel > 0.4);
    }
}
