use super::{solve, SolverConfig, SolverResult};
use crate::error::Result;
use crate::tensor::Tensor;

/// Solves `uᵀ = uᵀJ + vᵀ` given the map `u ↦ uᵀJ`, by running the configured
/// solver on `h(u) = uᵀJ + v` from `u = 0`.
pub fn linear_backward_solve<F>(mut vjp: F, v: &Tensor, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    solve(
        |u: &Tensor| vjp(u)?.add(v),
        &Tensor::zeros(v.shape()),
        cfg,
    )
}
