//! Samples of the layer map `f(z; x)` over a `(x, z)` grid, with the
//! equilibrium curve and a few solver trajectories, for plotting.

use serde::{Deserialize, Serialize};

use super::eval::reference_solve;
use crate::deq::EquilibriumModel;
use crate::error::{Error, Result};
use crate::solvers::{rel_residual, SolverConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub x: f64,
    pub z: f64,
    pub f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub x: f64,
    pub z_star: f64,
    pub rel_residual: f64,
    pub nfe: usize,
}

/// Picard trajectory from `z = 0`: `(zₖ, f(zₖ), residual)` per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub x: f64,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDump {
    pub grid: Vec<SurfacePoint>,
    pub equilibrium: Vec<EquilibriumPoint>,
    pub traces: Vec<Trace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSpec {
    pub x_list: Vec<f64>,
    pub z_range: (f64, f64),
    pub resolution: usize,
    pub trace_xs: Vec<f64>,
    pub trace_steps: usize,
    /// First attempt of the per-x [`reference_solve`].
    pub solver: SolverConfig,
}

fn scalar(v: f64) -> Tensor {
    Tensor::matrix(1, 1, vec![v]).expect("1x1")
}

/// Only scalar `(z, x)` layers can be dumped this way.
pub fn dump_surface<M: EquilibriumModel + ?Sized>(model: &M, spec: &SurfaceSpec) -> Result<SurfaceDump> {
    if model.dims() != (1, 1) {
        return Err(Error::shape("dump_surface", &[1, 1], &[model.dims().0, model.dims().1]));
    }
    let (lo, hi) = spec.z_range;
    if !(lo < hi) || spec.resolution < 2 {
        return Err(Error::InvalidConfig(vec![
            "surface needs z_min < z_max and at least two z samples".into(),
        ]));
    }
    let mut dump = SurfaceDump::default();
    let step = (hi - lo) / (spec.resolution - 1) as f64;
    for &x in &spec.x_list {
        let xt = scalar(x);
        for k in 0..spec.resolution {
            let z = lo + step * k as f64;
            let f = model.eval(&scalar(z), &xt)?.item();
            dump.grid.push(SurfacePoint { x, z, f });
        }
        let r = reference_solve(model, &xt, &spec.solver)?;
        dump.equilibrium.push(EquilibriumPoint {
            x,
            z_star: r.z_star.item(),
            rel_residual: r.final_residual(),
            nfe: r.nfe,
        });
    }
    for &x in &spec.trace_xs {
        let xt = scalar(x);
        let mut z = scalar(0.0);
        let mut points = Vec::with_capacity(spec.trace_steps);
        for _ in 0..spec.trace_steps {
            let fz = model.eval(&z, &xt)?;
            points.push((z.item(), fz.item(), rel_residual(&z, &fz)));
            if !fz.is_finite() {
                break;
            }
            z = fz;
        }
        dump.traces.push(Trace { x, points });
    }
    Ok(dump)
}
