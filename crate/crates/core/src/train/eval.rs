//! Per-sample evaluation: every row of `x` gets its own solve from `z = 0`,
//! so NFE counts and stopping decisions are per point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::deq::{EquilibriumModel, Linearization};
use crate::error::{Error, Result};
use crate::jacreg::{dense_jacobian, spectral_radius_dense, spectral_radius_power};
use crate::solvers::{solve, Method, SolverConfig, SolverResult};
use crate::tensor::Tensor;

fn row(t: &Tensor, i: usize) -> Tensor {
    let c = t.cols();
    Tensor::matrix(1, c, t.data()[i * c..(i + 1) * c].to_vec()).expect("row shape")
}

/// Solves `z = f(z; xᵢ)` for one input row.
pub fn solve_one<M: EquilibriumModel + ?Sized>(model: &M, x: &Tensor, cfg: &SolverConfig) -> Result<SolverResult> {
    let z0 = Tensor::zeros(&[1, model.dims().0]);
    solve(|z: &Tensor| model.eval(z, x), &z0, cfg)
}

/// A best-effort exact solve for reference values: `cfg` first, then Anderson
/// and Picard with ten times the budget. The first converged result wins;
/// otherwise the attempt with the smallest final residual is returned.
pub fn reference_solve<M: EquilibriumModel + ?Sized>(
    model: &M,
    x: &Tensor,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    let mut best: Option<SolverResult> = None;
    let long = cfg.max_nfe.saturating_mul(10);
    let attempts = [
        cfg.clone(),
        SolverConfig {
            method: Method::Anderson,
            max_nfe: long,
            ..cfg.clone()
        },
        SolverConfig {
            method: Method::Picard,
            max_nfe: long,
            ..cfg.clone()
        },
    ];
    let mut last_err = None;
    for attempt in &attempts {
        match solve_one(model, x, attempt) {
            Ok(r) if r.converged => return Ok(r),
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.final_residual() < b.final_residual()) {
                    best = Some(r);
                }
            }
            Err(e @ Error::Diverged { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("every attempt failed"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Infinite when any sample diverged.
    pub mse: f64,
    pub mean_nfe: f64,
    pub mean_rel_residual: f64,
    pub max_rel_residual: f64,
    pub converged_fraction: f64,
    pub diverged: usize,
}

/// Predictions `z*` for every row, with the per-row solver results.
pub fn predict<M: EquilibriumModel + ?Sized>(
    model: &M,
    xs: &Tensor,
    cfg: &SolverConfig,
) -> Result<(Tensor, Vec<SolverResult>)> {
    let mut out = Vec::with_capacity(xs.rows() * model.dims().0);
    let mut results = Vec::with_capacity(xs.rows());
    for i in 0..xs.rows() {
        let r = solve_one(model, &row(xs, i), cfg)?;
        out.extend_from_slice(r.z_star.data());
        results.push(r);
    }
    Ok((Tensor::matrix(xs.rows(), model.dims().0, out)?, results))
}

/// MSE and solver statistics under `cfg`. A diverging sample is counted at
/// the NFE it reached and makes the MSE infinite.
pub fn evaluate<M: EquilibriumModel + ?Sized>(
    model: &M,
    xs: &Tensor,
    ys: &Tensor,
    cfg: &SolverConfig,
) -> Result<EvalReport> {
    evaluate_with(model, xs, ys, |m, x| solve_one(m, x, cfg))
}

/// [`evaluate`] with [`reference_solve`] per sample.
pub fn evaluate_reference<M: EquilibriumModel + ?Sized>(
    model: &M,
    xs: &Tensor,
    ys: &Tensor,
    cfg: &SolverConfig,
) -> Result<EvalReport> {
    evaluate_with(model, xs, ys, |m, x| reference_solve(m, x, cfg))
}

fn evaluate_with<M: EquilibriumModel + ?Sized>(
    model: &M,
    xs: &Tensor,
    ys: &Tensor,
    mut solver: impl FnMut(&M, &Tensor) -> Result<SolverResult>,
) -> Result<EvalReport> {
    let n = xs.rows();
    if ys.rows() != n || n == 0 {
        return Err(Error::LengthMismatch("inputs and targets must be non-empty and of equal length".into()));
    }
    let dz = model.dims().0;
    let (mut sq, mut nfe, mut res_sum, mut res_max) = (0.0, 0usize, 0.0, 0.0f64);
    let (mut converged, mut diverged) = (0usize, 0usize);
    for i in 0..n {
        match solver(model, &row(xs, i)) {
            Ok(r) => {
                let res = r.final_residual();
                nfe += r.nfe;
                res_sum += res;
                res_max = res_max.max(res);
                converged += usize::from(r.converged);
                for k in 0..dz {
                    let e = r.z_star.data()[k] - ys.data()[i * dz + k];
                    sq += e * e;
                }
            }
            Err(Error::Diverged { nfe: k, .. }) => {
                nfe += k;
                diverged += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let ok = (n - diverged).max(1) as f64;
    Ok(EvalReport {
        n,
        mse: if diverged > 0 {
            f64::INFINITY
        } else {
            sq / (n * dz) as f64
        },
        mean_nfe: nfe as f64 / n as f64,
        mean_rel_residual: res_sum / ok,
        max_rel_residual: res_max,
        converged_fraction: converged as f64 / n as f64,
        diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianPoint {
    pub x: Vec<f64>,
    pub z_star: Vec<f64>,
    pub fro: f64,
    pub rho_dense: f64,
    pub rho_power: f64,
    pub power_converged: bool,
    pub rel_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianDiagnostics {
    pub points: Vec<JacobianPoint>,
    /// Mean of `‖J(z*ᵢ)‖²_F` over the points.
    pub fro_sq_mean: f64,
    /// Mean of `‖J(z*ᵢ)‖_F`.
    pub fro_mean: f64,
    pub rho_power_mean: f64,
    pub rho_dense_max: f64,
}

/// Exact per-point Jacobians at the [`reference_solve`] equilibria, plus a
/// power-method radius for each.
pub fn jacobian_diagnostics<M: EquilibriumModel + ?Sized>(
    model: &M,
    xs: &Tensor,
    cfg: &SolverConfig,
    power_iters: usize,
    rng: &mut impl Rng,
) -> Result<JacobianDiagnostics> {
    let mut points = Vec::with_capacity(xs.rows());
    for i in 0..xs.rows() {
        let x = row(xs, i);
        let r = reference_solve(model, &x, cfg)?;
        let graph = Graph::new();
        let lin = Linearization::new(model, &graph, &r.z_star, &x)?;
        let shape = lin.z_shape();
        let j = dense_jacobian(|u| lin.vjp_value(u), &shape)?;
        let power = spectral_radius_power(|u| lin.vjp_value(u), &shape, power_iters, 1e-12, rng)?;
        points.push(JacobianPoint {
            x: x.data().to_vec(),
            z_star: r.z_star.data().to_vec(),
            fro: j.norm(),
            rho_dense: spectral_radius_dense(&j)?,
            rho_power: power.rho,
            power_converged: power.converged,
            rel_residual: r.final_residual(),
        });
    }
    let n = points.len().max(1) as f64;
    Ok(JacobianDiagnostics {
        fro_sq_mean: points.iter().map(|p| p.fro * p.fro).sum::<f64>() / n,
        fro_mean: points.iter().map(|p| p.fro).sum::<f64>() / n,
        rho_power_mean: points.iter().map(|p| p.rho_power).sum::<f64>() / n,
        rho_dense_max: points.iter().map(|p| p.rho_dense).fold(0.0, f64::max),
        points,
    })
}
