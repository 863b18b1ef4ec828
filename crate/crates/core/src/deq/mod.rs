//! Equilibrium layers: the forward pass is a root solve of `z = f(z; x)`, the
//! backward pass goes through the implicit function theorem.
//!
//! The forward solve runs on plain tensors, so no per-iteration graph is kept.
//! Gradients come from a single application of `f` at `z*`, recorded on a
//! [`Graph`] by [`Linearization`]: first the linear system
//! `uᵀ = uᵀ J + ∂ℓ/∂z*` is solved with VJPs, then `uᵀ ∂f/∂θ` is one more
//! reverse sweep.

mod layers;
mod params;

pub use layers::{apply_with_leaves, LinearLayer, SyntheticBlock, TanhLayer};
pub use params::{blob_path_for, ParamSet};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::solvers::{linear_backward_solve, solve, SolverConfig, SolverResult};
use crate::tensor::Tensor;

/// A layer `f_θ(z; x)` whose fixed point defines the network output.
pub trait EquilibriumModel {
    fn kind(&self) -> &'static str;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Per-sample `(d_z, d_x)`.
    fn dims(&self) -> (usize, usize);

    /// Records `f(z; x)` on the graph; `params` follow [`params`](Self::params) order.
    fn apply<'g>(&self, z: Var<'g>, x: Var<'g>, params: &[Var<'g>]) -> Result<Var<'g>>;

    /// Evaluates `f(z; x)` without keeping any graph.
    fn eval(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params: Vec<Var<'_>> = self.params().tensors().map(|t| g.constant(t.clone())).collect();
        let out = self.apply(g.constant(z.clone()), g.constant(x.clone()), &params)?;
        Ok(out.value())
    }
}

#[derive(Clone, Debug)]
pub struct DeqOutput {
    pub z_star: Tensor,
    pub x: Tensor,
    pub forward: SolverResult,
}

fn check_input<M: EquilibriumModel + ?Sized>(model: &M, x: &Tensor) -> Result<usize> {
    let (_, dx) = model.dims();
    if x.shape().len() != 2 || x.cols() != dx {
        return Err(Error::shape("equilibrium input", &[0, dx], x.shape()));
    }
    Ok(x.rows())
}

/// Solves `z* = f(z*; x)` from `z = 0`. The whole batch is one joint system.
pub fn deq_forward<M: EquilibriumModel + ?Sized>(
    model: &M,
    x: &Tensor,
    cfg: &SolverConfig,
) -> Result<DeqOutput> {
    let batch = check_input(model, x)?;
    let z0 = Tensor::zeros(&[batch, model.dims().0]);
    let forward = solve(|z: &Tensor| model.eval(z, x), &z0, cfg)?;
    Ok(DeqOutput {
        z_star: forward.z_star.clone(),
        x: x.clone(),
        forward,
    })
}

/// One application of `f` at a fixed `(z, x)`, with `z`, `x` and every
/// parameter recorded as differentiable leaves.
pub struct Linearization<'g> {
    pub graph: &'g Graph,
    pub z: Var<'g>,
    pub x: Var<'g>,
    pub params: Vec<Var<'g>>,
    pub out: Var<'g>,
}

impl<'g> Linearization<'g> {
    pub fn new<M: EquilibriumModel + ?Sized>(
        model: &M,
        graph: &'g Graph,
        z: &Tensor,
        x: &Tensor,
    ) -> Result<Self> {
        let zv = graph.leaf(z.clone());
        let xv = graph.leaf(x.clone());
        let (out, params) = apply_with_leaves(model, graph, zv, xv)?;
        Ok(Linearization {
            graph,
            z: zv,
            x: xv,
            params,
            out,
        })
    }

    pub fn at<M: EquilibriumModel + ?Sized>(model: &M, graph: &'g Graph, out: &DeqOutput) -> Result<Self> {
        Self::new(model, graph, &out.z_star, &out.x)
    }

    /// Number of entries of `z`, i.e. the Jacobian dimension.
    pub fn dim(&self) -> usize {
        self.out.value().len()
    }

    pub fn z_shape(&self) -> Vec<usize> {
        self.z.shape()
    }

    /// `uᵀ J_f(z)` as a graph value, differentiable with respect to the parameters.
    pub fn vjp(&self, u: &Tensor) -> Result<Var<'g>> {
        let seed = self.graph.constant(u.clone());
        Ok(self.graph.gradients(self.out, Some(seed), &[self.z])?[0])
    }

    /// `uᵀ J_f(z)` as a plain tensor. Leaves the graph as it was.
    pub fn vjp_value(&self, u: &Tensor) -> Result<Tensor> {
        let mark = self.graph.len();
        let value = self.vjp(u).map(|v| v.value());
        self.graph.truncate(mark);
        value
    }
}

/// `uᵀ J_f(z*)`, differentiable.
pub fn jacobian_vjp<'g>(lin: &Linearization<'g>, u: &Tensor) -> Result<Var<'g>> {
    lin.vjp(u)
}

#[derive(Clone, Debug)]
pub struct DeqGrads {
    /// `∂ℓ/∂θ`, same names and shapes as the model parameters.
    pub params: ParamSet,
    /// `∂ℓ/∂x`.
    pub x: Tensor,
    /// Solve of the `uᵀ` system.
    pub backward: SolverResult,
}

/// Implicit gradients `∂ℓ/∂θ = uᵀ ∂f/∂θ`, with `uᵀ = uᵀ J + ∂ℓ/∂z*`.
pub fn deq_backward<M: EquilibriumModel + ?Sized>(
    model: &M,
    out: &DeqOutput,
    dl_dz: &Tensor,
    cfg: &SolverConfig,
) -> Result<DeqGrads> {
    if dl_dz.shape() != out.z_star.shape() {
        return Err(Error::shape("deq_backward", out.z_star.shape(), dl_dz.shape()));
    }
    let graph = Graph::new();
    let lin = Linearization::at(model, &graph, out)?;
    implicit_grads(model, &lin, dl_dz, cfg)
}

/// [`deq_backward`] on an existing linearization at `z*`.
pub fn implicit_grads<M: EquilibriumModel + ?Sized>(
    model: &M,
    lin: &Linearization<'_>,
    dl_dz: &Tensor,
    cfg: &SolverConfig,
) -> Result<DeqGrads> {
    if dl_dz.shape() != lin.z_shape().as_slice() {
        return Err(Error::shape("implicit_grads", &lin.z_shape(), dl_dz.shape()));
    }
    let backward = linear_backward_solve(|u: &Tensor| lin.vjp_value(u), dl_dz, cfg)?;
    let (params, x) = param_and_input_grads(model, lin, &backward.z_star)?;
    Ok(DeqGrads {
        params,
        x,
        backward,
    })
}

/// `uᵀ ∂f/∂θ` and `uᵀ ∂f/∂x` through the recorded application.
fn param_and_input_grads<M: EquilibriumModel + ?Sized>(
    model: &M,
    lin: &Linearization<'_>,
    u: &Tensor,
) -> Result<(ParamSet, Tensor)> {
    let mut wrt = lin.params.clone();
    wrt.push(lin.x);
    let seed = lin.graph.constant(u.clone());
    let grads = lin.graph.gradients(lin.out, Some(seed), &wrt)?;
    let mut values: Vec<Tensor> = grads.iter().map(Var::value).collect();
    let x = values.pop().expect("x gradient present");
    Ok((model.params().with_values(values)?, x))
}
