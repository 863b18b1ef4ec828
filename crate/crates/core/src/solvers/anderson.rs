use std::collections::VecDeque;

use super::{SolverConfig, SolverResult, Tracker};
use crate::error::Result;
use crate::tensor::Tensor;

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// Returns `None` for (numerically) singular systems.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Mixing weights `α` minimising `‖Σ αᵢ gᵢ‖² + ridge ‖α‖²` subject to `Σ αᵢ = 1`,
/// via the bordered system `[[0, 1ᵀ], [1, GGᵀ + ridge·I]] [μ; α] = [1; 0]`.
fn mixing_weights(residuals: &VecDeque<Vec<f64>>, ridge: f64) -> Option<Vec<f64>> {
    let n = residuals.len();
    let size = n + 1;
    let mut h = vec![0.0; size * size];
    for i in 0..n {
        h[i + 1] = 1.0;
        h[(i + 1) * size] = 1.0;
        for j in 0..=i {
            let g: f64 = residuals[i].iter().zip(&residuals[j]).map(|(a, b)| a * b).sum();
            h[(i + 1) * size + j + 1] = g;
            h[(j + 1) * size + i + 1] = g;
        }
        h[(i + 1) * size + i + 1] += ridge;
    }
    let mut rhs = vec![0.0; size];
    rhs[0] = 1.0;
    solve_dense(h, rhs, size).map(|sol| sol[1..].to_vec())
}

/// Anderson acceleration with a window of `anderson_m` past iterates.
pub fn anderson_solve<F>(f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let m = cfg.anderson_m.max(1);
    let beta = cfg.anderson_beta;
    let shape = z0.shape().to_vec();
    let mut tracker = Tracker::new(f);
    let mut xs: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);
    let mut fs: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);
    let mut gs: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);

    let mut x = z0.clone();
    loop {
        let (fx, r) = tracker.eval(&x)?;
        if r <= cfg.eps {
            return Ok(tracker.finish(x, true));
        }
        if xs.len() == m {
            xs.pop_front();
            fs.pop_front();
            gs.pop_front();
        }
        let g: Vec<f64> = fx.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        xs.push_back(x.into_data());
        fs.push_back(fx.data().to_vec());
        gs.push_back(g);

        let next = match mixing_weights(&gs, cfg.anderson_ridge) {
            Some(alpha) => {
                let d = fx.len();
                let (mut acc_f, mut acc_x) = (vec![0.0; d], vec![0.0; d]);
                for ((a, fi), xi) in alpha.iter().zip(&fs).zip(&xs) {
                    for k in 0..d {
                        acc_f[k] += a * fi[k];
                        acc_x[k] += a * xi[k];
                    }
                }
                acc_f
                    .iter()
                    .zip(&acc_x)
                    .map(|(a, b)| beta * a + (1.0 - beta) * b)
                    .collect()
            }
            // singular least-squares system: plain Picard step
            None => fx.data().to_vec(),
        };
        x = Tensor::new(shape.clone(), next)?;
        if tracker.nfe >= cfg.max_nfe {
            return Ok(tracker.finish(x, false));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{picard_solve, Method};

    #[test]
    fn dense_solver_handles_pivoting() {
        let x = solve_dense(vec![0.0, 1.0, 1.0, 1.0], vec![1.0, 3.0], 2).unwrap();
        assert_eq!(x, vec![2.0, 1.0]);
        assert!(solve_dense(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 1.0], 2).is_none());
    }

    #[test]
    fn single_window_weight_is_one() {
        let mut g = VecDeque::new();
        g.push_back(vec![0.3, -0.4]);
        assert_eq!(mixing_weights(&g, 1e-10).unwrap(), vec![1.0]);
    }

    #[test]
    fn affine_scalar_not_slower_than_picard() {
        let cfg = SolverConfig::new(Method::Anderson, 1e-8, 200);
        let f = |z: &Tensor| Ok(z.map(|v| 0.5 * v + 1.0));
        let a = anderson_solve(f, &Tensor::scalar(0.0), &cfg).unwrap();
        let p = picard_solve(f, &Tensor::scalar(0.0), &cfg).unwrap();
        assert!(a.converged);
        assert!((a.z_star.item() - 2.0).abs() < 1e-7);
        assert!(a.nfe <= p.nfe, "{} > {}", a.nfe, p.nfe);
    }

    #[test]
    fn singular_history_falls_back_to_picard() {
        // A constant shift gives identical residuals, so GGᵀ is singular without a ridge.
        let cfg = SolverConfig {
            anderson_ridge: 0.0,
            anderson_m: 3,
            ..SolverConfig::new(Method::Anderson, 1e-12, 5)
        };
        let res = anderson_solve(|z: &Tensor| Ok(z.map(|v| v + 1.0)), &Tensor::scalar(0.0), &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.z_star.item(), 5.0);
    }
}
