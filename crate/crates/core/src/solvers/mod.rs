//! Black-box fixed-point solvers for `z = f(z)`.
//!
//! All solvers share one stopping rule: stop as soon as the relative residual
//! `‖f(z) − z‖ / ‖f(z)‖` of an evaluated point drops to `eps` (that point is
//! returned), or when `max_nfe` evaluations have been spent. On an NFE cap the
//! solver returns its next iterate built from the information already paid
//! for, without evaluating it.

mod anderson;
mod broyden;
mod linear;
mod picard;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use anderson::anderson_solve;
pub use broyden::{broyden_solve, broyden_solve_with_memory, BroydenMemory};
pub use linear::linear_backward_solve;
pub use picard::picard_solve;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Picard,
    Broyden,
    Anderson,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "picard" => Ok(Method::Picard),
            "broyden" => Ok(Method::Broyden),
            "anderson" => Ok(Method::Anderson),
            other => Err(format!("unknown solver `{other}` (expected picard, broyden or anderson)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Picard => "picard",
            Method::Broyden => "broyden",
            Method::Anderson => "anderson",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    /// Relative-residual threshold.
    pub eps: f64,
    /// Hard cap on function evaluations.
    pub max_nfe: usize,
    pub anderson_m: usize,
    pub anderson_beta: f64,
    pub anderson_ridge: f64,
    pub broyden_rank_cap: usize,
    /// Broyden only: one inverse-Jacobian estimate per row of a 2-D iterate.
    pub per_row: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Broyden,
            eps: 1e-3,
            max_nfe: 6,
            anderson_m: 5,
            anderson_beta: 1.0,
            anderson_ridge: 1e-10,
            broyden_rank_cap: 32,
            per_row: false,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, eps: f64, max_nfe: usize) -> Self {
        SolverConfig {
            method,
            eps,
            max_nfe,
            ..Default::default()
        }
    }

    /// Every violated constraint, each prefixed with `prefix`.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            out.push(format!("{prefix}.eps must be a positive number, got {}", self.eps));
        }
        if self.max_nfe < 1 {
            out.push(format!("{prefix}.max_nfe must be at least 1"));
        }
        if self.anderson_m < 1 {
            out.push(format!("{prefix}.anderson_m must be at least 1"));
        }
        if !(self.anderson_beta > 0.0 && self.anderson_beta <= 1.0) {
            out.push(format!(
                "{prefix}.anderson_beta must lie in (0, 1], got {}",
                self.anderson_beta
            ));
        }
        if !(self.anderson_ridge >= 0.0) {
            out.push(format!(
                "{prefix}.anderson_ridge must be non-negative, got {}",
                self.anderson_ridge
            ));
        }
        if self.broyden_rank_cap < 1 {
            out.push(format!("{prefix}.broyden_rank_cap must be at least 1"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems("solver");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    NfeCap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult {
    pub z_star: Tensor,
    /// Number of evaluations of `f`.
    pub nfe: usize,
    /// Relative residual of every evaluated point, in order.
    pub rel_residual_trace: Vec<f64>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl SolverResult {
    pub fn final_residual(&self) -> f64 {
        *self.rel_residual_trace.last().expect("trace is never empty")
    }
}

const RESIDUAL_FLOOR: f64 = 1e-12;

/// `‖fz − z‖₂ / max(‖fz‖₂, 1e-12)` over the flattened tensors.
pub fn rel_residual(z: &Tensor, fz: &Tensor) -> f64 {
    debug_assert_eq!(z.shape(), fz.shape());
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, b) in z.data().iter().zip(fz.data()) {
        diff += (b - a) * (b - a);
        norm += b * b;
    }
    diff.sqrt() / norm.sqrt().max(RESIDUAL_FLOOR)
}

/// Dispatches to the configured method.
pub fn solve<F>(f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    match cfg.method {
        Method::Picard => picard_solve(f, z0, cfg),
        Method::Broyden => broyden_solve(f, z0, cfg),
        Method::Anderson => anderson_solve(f, z0, cfg),
    }
}

/// Counts evaluations, records residuals and turns non-finite values into divergence errors.
struct Tracker<F> {
    f: F,
    nfe: usize,
    trace: Vec<f64>,
}

impl<F> Tracker<F>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    fn new(f: F) -> Self {
        Tracker {
            f,
            nfe: 0,
            trace: Vec::new(),
        }
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            nfe: self.nfe,
            trace: self.trace.clone(),
        }
    }

    /// Evaluates `f(z)` and returns it with the relative residual of `z`.
    fn eval(&mut self, z: &Tensor) -> Result<(Tensor, f64)> {
        if !z.is_finite() {
            return Err(self.diverged());
        }
        self.nfe += 1;
        let fz = match (self.f)(z) {
            Ok(fz) => fz,
            Err(Error::NonFinite { .. }) => return Err(self.diverged()),
            Err(e) => return Err(e),
        };
        if fz.shape() != z.shape() {
            return Err(Error::shape("fixed-point map", z.shape(), fz.shape()));
        }
        if !fz.is_finite() {
            return Err(self.diverged());
        }
        let r = rel_residual(z, &fz);
        self.trace.push(r);
        Ok((fz, r))
    }

    fn finish(self, z_star: Tensor, converged: bool) -> SolverResult {
        SolverResult {
            z_star,
            nfe: self.nfe,
            rel_residual_trace: self.trace,
            converged,
            stop_reason: if converged {
                StopReason::Threshold
            } else {
                StopReason::NfeCap
            },
        }
    }
}
