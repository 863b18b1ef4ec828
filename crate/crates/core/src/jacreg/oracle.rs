//! Exact small-matrix oracles and spectral diagnostics.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest Jacobian the dense oracle will assemble.
pub const DENSE_LIMIT: usize = 512;

/// Assembles `J` row by row from the VJPs `e_iᵀ J`.
///
/// `shape` is the shape of `z`; the Jacobian is over its flattened entries.
pub fn dense_jacobian<F>(mut vjp: F, shape: &[usize]) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let d: usize = shape.iter().product();
    if d > DENSE_LIMIT {
        return Err(Error::DimensionGuard { d, max: DENSE_LIMIT });
    }
    let mut data = Vec::with_capacity(d * d);
    let mut basis = Tensor::zeros(shape).into_data();
    for i in 0..d {
        basis[i] = 1.0;
        let row = vjp(&Tensor::new(shape.to_vec(), basis.clone())?)?;
        basis[i] = 0.0;
        if row.len() != d {
            return Err(Error::shape("dense_jacobian", shape, row.shape()));
        }
        data.extend_from_slice(row.data());
    }
    Tensor::matrix(d, d, data)
}

fn square_matrix(j: &Tensor, op: &'static str) -> Result<DMatrix<f64>> {
    if j.shape().len() != 2 || j.rows() != j.cols() {
        return Err(Error::shape(op, j.shape(), &[j.rows(), j.rows()]));
    }
    Ok(DMatrix::from_row_slice(j.rows(), j.cols(), j.data()))
}

/// `max |λ|` from a full eigendecomposition.
pub fn spectral_radius_dense(j: &Tensor) -> Result<f64> {
    let m = square_matrix(j, "spectral_radius_dense")?;
    Ok(m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max))
}

/// Largest singular value.
pub fn sigma_max(j: &Tensor) -> Result<f64> {
    let m = square_matrix(j, "sigma_max")?;
    Ok(m.singular_values().iter().copied().fold(0.0, f64::max))
}

pub fn frobenius(j: &Tensor) -> f64 {
    j.norm()
}

/// Column-sum surrogate for the matrix 1-norm, `‖(1ᵀJ − λ)⁺‖₂`.
///
/// Kept as a negative control: it can vanish on matrices with a large
/// spectral radius.
pub fn column_sum_approx_check(j: &Tensor, lambda: f64) -> Result<f64> {
    if j.shape().len() != 2 || j.rows() != j.cols() {
        return Err(Error::shape("column_sum_approx_check", j.shape(), &[j.rows(), j.rows()]));
    }
    let sums = j.sum_rows()?;
    Ok(sums
        .data()
        .iter()
        .map(|s| (s - lambda).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// The 2×2 matrix whose column sums vanish although it has an eigenvalue of 4.
pub fn counterexample_matrix() -> Tensor {
    Tensor::from_rows(&[&[2.0, -2.0], &[-2.0, 2.0]])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerEstimate {
    pub rho: f64,
    /// False when the estimate still moved by more than `tol` on the last step.
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
}

const MAX_RESTARTS: usize = 3;

fn random_unit(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
    .expect("shape matches");
    let norm = v.norm();
    v.scale(1.0 / norm)
}

/// Power iteration for `ρ(J)` driven only by VJPs (`Jᵀ` has the spectrum of `J`).
///
/// The estimate after each step is the geometric mean of the last two norm
/// ratios, `√(‖Jᵀw‖·‖Jᵀv‖)`, which also settles when the dominant
/// eigenvalues are a `±λ` pair. It stops early once consecutive estimates
/// agree to `tol`. A complex dominant pair never settles and is reported as
/// not converged.
pub fn spectral_radius_power<F>(
    mut vjp: F,
    shape: &[usize],
    iters: usize,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<PowerEstimate>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let iters = iters.max(1);
    let mut v = random_unit(shape, rng);
    let mut restarts = 0;
    let mut prev_ratio: Option<f64> = None;
    let mut prev_est: Option<f64> = None;
    let mut est = 0.0;
    let mut moved = f64::INFINITY;

    let mut it = 0;
    while it < iters {
        it += 1;
        let w = vjp(&v)?;
        let ratio = w.norm();
        if !ratio.is_finite() {
            return Err(Error::NonFinite {
                op: "spectral_radius_power",
            });
        }
        if ratio < 1e-300 {
            // Krylov sequence collapsed
            if restarts == MAX_RESTARTS {
                return Ok(PowerEstimate {
                    rho: 0.0,
                    converged: true,
                    iterations: it,
                    restarts,
                });
            }
            restarts += 1;
            v = random_unit(shape, rng);
            prev_ratio = None;
            prev_est = None;
            continue;
        }
        est = match prev_ratio {
            Some(p) => (p * ratio).sqrt(),
            None => ratio,
        };
        if let Some(p) = prev_est {
            moved = (est - p).abs();
            if moved <= tol {
                break;
            }
        }
        prev_ratio = Some(ratio);
        prev_est = Some(est);
        v = w.scale(1.0 / ratio);
    }
    Ok(PowerEstimate {
        rho: est,
        converged: moved <= tol,
        iterations: it,
        restarts,
    })
}

/// Runs [`spectral_radius_power`] on an explicit matrix.
pub fn matrix_power_radius(j: &Tensor, iters: usize, tol: f64, rng: &mut impl Rng) -> Result<PowerEstimate> {
    let d = j.rows();
    spectral_radius_power(
        |u: &Tensor| u.reshape(&[1, d])?.matmul(j)?.reshape(&[d]),
        &[d],
        iters,
        tol,
        rng,
    )
}
