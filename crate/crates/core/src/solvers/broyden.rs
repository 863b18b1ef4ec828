use std::collections::VecDeque;

use super::{SolverConfig, SolverResult, Tracker};
use crate::error::Result;
use crate::tensor::Tensor;

const DENOMINATOR_GUARD: f64 = 1e-12;

/// Low-rank inverse Jacobian `−I + U Vᵀ` of `g(z) = f(z) − z`.
///
/// Only the `U` and `V` columns are stored: `2 · rank · d` floats.
#[derive(Clone, Debug)]
pub struct BroydenMemory {
    dim: usize,
    cap: usize,
    us: VecDeque<Vec<f64>>,
    vs: VecDeque<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BroydenMemory {
    pub fn new(dim: usize, cap: usize) -> Self {
        BroydenMemory {
            dim,
            cap,
            us: VecDeque::with_capacity(cap),
            vs: VecDeque::with_capacity(cap),
        }
    }

    pub fn rank(&self) -> usize {
        self.us.len()
    }

    pub fn us(&self) -> impl Iterator<Item = &[f64]> {
        self.us.iter().map(Vec::as_slice)
    }

    pub fn vs(&self) -> impl Iterator<Item = &[f64]> {
        self.vs.iter().map(Vec::as_slice)
    }

    pub fn stored_floats(&self) -> usize {
        self.us.iter().chain(&self.vs).map(Vec::len).sum()
    }

    /// `B x = −x + U (Vᵀ x)`.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(v, x);
            for (o, ui) in out.iter_mut().zip(u) {
                *o += c * ui;
            }
        }
        out
    }

    /// `Bᵀ x = −x + V (Uᵀ x)`.
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(u, x);
            for (o, vi) in out.iter_mut().zip(v) {
                *o += c * vi;
            }
        }
        out
    }

    /// Good-Broyden secant update. Returns false when the update was skipped.
    fn update(&mut self, dz: &[f64], dg: &[f64]) -> bool {
        let b_dg = self.apply(dg);
        let v = self.apply_transpose(dz);
        let denom = dot(&v, dg);
        if denom.abs() <= DENOMINATOR_GUARD || !denom.is_finite() {
            return false;
        }
        let u: Vec<f64> = dz.iter().zip(&b_dg).map(|(a, b)| (a - b) / denom).collect();
        if self.us.len() == self.cap {
            self.us.pop_front();
            self.vs.pop_front();
        }
        self.us.push_back(u);
        self.vs.push_back(v);
        true
    }

    /// Quasi-Newton step `−B g`.
    fn step(&self, g: &[f64]) -> Vec<f64> {
        self.apply(g).into_iter().map(|v| -v).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Broyden's method on `g(z) = f(z) − z` with unit steps.
///
/// With `cfg.per_row` set and a 2-D iterate, each row keeps its own inverse
/// Jacobian estimate (a block-diagonal approximation for batches of
/// independent problems). Stopping and NFE counting stay joint.
pub fn broyden_solve<F>(f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    broyden_solve_with_memory(f, z0, cfg).map(|(res, _)| res)
}

/// As [`broyden_solve`], also returning the final low-rank memories, one per
/// block.
pub fn broyden_solve_with_memory<F>(
    f: F,
    z0: &Tensor,
    cfg: &SolverConfig,
) -> Result<(SolverResult, Vec<BroydenMemory>)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let shape = z0.shape().to_vec();
    let (blocks, width) = if cfg.per_row && shape.len() == 2 {
        (shape[0], shape[1])
    } else {
        (1, z0.len())
    };
    let mut memory: Vec<BroydenMemory> = (0..blocks)
        .map(|_| BroydenMemory::new(width, cfg.broyden_rank_cap))
        .collect();
    let mut tracker = Tracker::new(f);

    let mut z = z0.data().to_vec();
    let (fz, r) = tracker.eval(z0)?;
    if r <= cfg.eps {
        return Ok((tracker.finish(z0.clone(), true), memory));
    }
    let mut g: Vec<f64> = fz.data().iter().zip(&z).map(|(a, b)| a - b).collect();

    loop {
        let dz: Vec<f64> = memory
            .iter()
            .zip(g.chunks(width))
            .flat_map(|(m, gb)| m.step(gb))
            .collect();
        let z_new: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        if tracker.nfe >= cfg.max_nfe {
            let out = Tensor::new(shape, z_new)?;
            return Ok((tracker.finish(out, false), memory));
        }
        let z_new_t = Tensor::new(shape.clone(), z_new)?;
        let (fz_new, r) = tracker.eval(&z_new_t)?;
        if r <= cfg.eps {
            return Ok((tracker.finish(z_new_t, true), memory));
        }
        let z_new = z_new_t.into_data();
        let g_new: Vec<f64> = fz_new.data().iter().zip(&z_new).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        for ((m, dzb), dgb) in memory.iter_mut().zip(dz.chunks(width)).zip(dg.chunks(width)) {
            m.update(dzb, dgb);
        }
        z = z_new;
        g = g_new;
    }
}
