//! Central finite differences, used as an independent oracle for the AD engine
//! and the implicit backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `at`.
pub fn finite_difference_grad<F>(mut f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(vec![format!(
            "finite difference step must be positive, got {step}"
        )]));
    }
    let mut grad = Vec::with_capacity(at.len());
    let mut probe = at.data().to_vec();
    for i in 0..at.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&Tensor::new(at.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - step;
        let minus = f(&Tensor::new(at.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// `‖a − b‖ / max(‖b‖, floor)`; the comparison metric used against oracles.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.norm().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &Tensor::vector(vec![1.0, 2.0]), 1e-5)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_difference_grad(|t| Ok(t.item().sin()), &Tensor::scalar(0.0), 1e-6).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let at = Tensor::scalar(1.0);
        assert!(finite_difference_grad(|t| Ok(t.item()), &at, 0.0).is_err());
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &at, 1e-3).is_err());
    }
}
