//! Measurements shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::Path;

use deq_core::autodiff::Graph;
use deq_core::deq::{deq_backward, deq_forward, EquilibriumModel, Linearization, ParamSet, SyntheticBlock};
use deq_core::experiment::{checksums, run_experiment, RunArtifacts};
use deq_core::fd::{finite_difference_grad, relative_error};
use deq_core::jacreg::{
    column_sum_approx_check, counterexample_matrix, frobenius, hutchinson_fro_sq, hutchinson_trace,
    matrix_power_radius, sigma_max, spectral_radius_dense, Probe,
};
use deq_core::solvers::{
    anderson_solve, broyden_solve, linear_backward_solve, picard_solve, Method, SolverConfig,
};
use deq_core::{RunConfig, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn matrix_vjp(j: &Tensor) -> impl FnMut(&Tensor) -> deq_core::Result<Tensor> + '_ {
    let d = j.rows();
    move |u: &Tensor| u.reshape(&[1, d])?.matmul(j)?.reshape(&[d])
}

pub fn column(v: &[f64]) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
}

// ---------------------------------------------------------------- counterexample

pub struct Counterexample {
    pub column_loss: f64,
    pub rho: f64,
    pub fro: f64,
}

pub fn counterexample() -> Counterexample {
    let j = counterexample_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Counterexample {
        column_loss: column_sum_approx_check(&j, 0.0).unwrap(),
        rho: matrix_power_radius(&j, 500, 1e-12, &mut rng).unwrap().rho,
        fro: frobenius(&j),
    }
}

// ---------------------------------------------------------------- bound chain

/// Violations of `ρ ≤ σ_max ≤ ‖·‖_F` over `n` random matrices with `d ≤ 16`.
pub fn bound_chain_violations(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..n {
        let d = rng.random_range(1..=16);
        let std = rng.random_range(0.1..3.0);
        let j = gaussian_matrix(&mut rng, d, d, std);
        let rho = spectral_radius_dense(&j).unwrap();
        let sig = sigma_max(&j).unwrap();
        let fro = frobenius(&j);
        let slack = 1e-12 * fro.max(1.0);
        if rho > sig + slack || sig > fro + slack {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- Hutchinson

pub struct HutchinsonReport {
    /// Worst `|mean − tr(JJᵀ)| / tr(JJᵀ)` over the matrices.
    pub worst_mean_error: f64,
    pub sample_counts: Vec<usize>,
    /// Mean over matrices of `std(M)·√M / std(1)`; ideally 1 for every `M`.
    pub normalized_std: Vec<f64>,
    /// Least-squares slope of `log std` against `log M`.
    pub log_slope: f64,
}

pub fn hutchinson_report(matrices: usize, big_m: usize, reps: usize, seed: u64) -> HutchinsonReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = vec![1usize, 4, 16, 64];
    let mut worst: f64 = 0.0;
    let mut normalized = vec![0.0; counts.len()];
    let mut log_std = vec![0.0; counts.len()];
    for _ in 0..matrices {
        let j = gaussian_matrix(&mut rng, 10, 10, 1.0);
        let exact = j.data().iter().map(|v| v * v).sum::<f64>();
        let mean = hutchinson_trace(matrix_vjp(&j), &[10], big_m, Probe::Gaussian, &mut rng).unwrap();
        worst = worst.max((mean - exact).abs() / exact);
        let stds: Vec<f64> = counts
            .iter()
            .map(|&m| {
                let draws: Vec<f64> = (0..reps)
                    .map(|_| hutchinson_trace(matrix_vjp(&j), &[10], m, Probe::Gaussian, &mut rng).unwrap())
                    .collect();
                let mu = draws.iter().sum::<f64>() / reps as f64;
                (draws.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
            })
            .collect();
        for (i, (&m, s)) in counts.iter().zip(&stds).enumerate() {
            normalized[i] += s * (m as f64).sqrt() / stds[0] / matrices as f64;
            log_std[i] += s.ln() / matrices as f64;
        }
    }
    let xs: Vec<f64> = counts.iter().map(|&m| (m as f64).ln()).collect();
    HutchinsonReport {
        worst_mean_error: worst,
        sample_counts: counts,
        normalized_std: normalized,
        log_slope: deq_core::train::ls_slope(&xs, &log_std),
    }
}

// ---------------------------------------------------------------- IFT parity

pub fn tight(method: Method) -> SolverConfig {
    SolverConfig {
        per_row: true,
        ..SolverConfig::new(method, 1e-13, 500)
    }
}

/// A random block whose `|∂f/∂z|` stays below 0.6 on `[-2, 2]²`.
pub fn contractive_block(seed: u64) -> SyntheticBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = SyntheticBlock::init(SyntheticBlock::HIDDEN, 0.3, &mut rng);
    loop {
        let mut worst: f64 = 0.0;
        for i in 0..=20 {
            for k in 0..=20 {
                let (z, x) = (-2.0 + 0.2 * i as f64, -2.0 + 0.2 * k as f64);
                worst = worst.max(block.analytic_jacobian(z, x).abs());
            }
        }
        if worst < 0.6 {
            return block;
        }
        let w1 = block.params_mut().tensors_mut().next().unwrap();
        *w1 = w1.scale(0.5);
    }
}

pub fn parity_batch(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let xs: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
    let ys: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    (column(&xs), column(&ys))
}

fn with_params(block: &SyntheticBlock, flat: &Tensor) -> SyntheticBlock {
    SyntheticBlock::from_params(block.params().unflatten(flat).unwrap()).unwrap()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

fn mse_grad(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.len() as f64;
    a.sub(b).unwrap().scale(2.0 / n)
}

pub fn ift_grad(block: &SyntheticBlock, x: &Tensor, y: &Tensor) -> Tensor {
    let out = deq_forward(block, x, &tight(Method::Broyden)).unwrap();
    let g = deq_backward(block, &out, &mse_grad(&out.z_star, y), &tight(Method::Broyden)).unwrap();
    g.params.flatten()
}

pub fn fd_resolve_grad(block: &SyntheticBlock, x: &Tensor, y: &Tensor) -> Tensor {
    let theta = block.params().flatten();
    finite_difference_grad(
        |t| {
            let b = with_params(block, t);
            let out = deq_forward(&b, x, &tight(Method::Broyden))?;
            Ok(mse(&out.z_star, y))
        },
        &theta,
        1e-6,
    )
    .unwrap()
}

/// Backpropagation through `steps` Picard applications from `z = 0`.
pub fn unrolled_grad(block: &SyntheticBlock, x: &Tensor, y: &Tensor, steps: usize) -> Tensor {
    let g = Graph::new();
    let params: Vec<_> = block.params().tensors().map(|t| g.leaf(t.clone())).collect();
    let xv = g.constant(x.clone());
    let mut z = g.constant(Tensor::zeros(x.shape()));
    for _ in 0..steps {
        z = block.apply(z, xv, &params).unwrap();
    }
    let loss = z.mse(&g.constant(y.clone())).unwrap();
    let grads = g.gradients(loss, None, &params).unwrap();
    let values: Vec<Tensor> = grads.iter().map(|v| v.value()).collect();
    block.params().with_values(values).unwrap().flatten()
}

pub struct ParityReport {
    pub worst_fd: f64,
    pub worst_unrolled: f64,
}

pub fn ift_parity(seeds: std::ops::Range<u64>) -> ParityReport {
    let (mut worst_fd, mut worst_unrolled): (f64, f64) = (0.0, 0.0);
    for seed in seeds {
        let block = contractive_block(seed);
        let (x, y) = parity_batch(seed);
        let ift = ift_grad(&block, &x, &y);
        worst_fd = worst_fd.max(relative_error(&ift, &fd_resolve_grad(&block, &x, &y), 1e-12));
        worst_unrolled = worst_unrolled.max(relative_error(&ift, &unrolled_grad(&block, &x, &y, 60), 1e-12));
    }
    ParityReport {
        worst_fd,
        worst_unrolled,
    }
}

// ---------------------------------------------------------------- penalty gradient

/// `Σₘ‖εₘᵀJ‖²/(M·d)` at fixed `(z, x)` with probes drawn from `seed`, and its
/// parameter gradient.
pub fn penalty_and_grad(block: &SyntheticBlock, z: &Tensor, x: &Tensor, m: usize, seed: u64) -> (f64, ParamSet) {
    let g = Graph::new();
    let lin = Linearization::new(block, &g, z, x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = hutchinson_fro_sq(|e| lin.vjp(e), &lin.z_shape(), m, Probe::Gaussian, &mut rng).unwrap();
    let grads = g.gradients(est.fro_sq_over_d, None, &lin.params).unwrap();
    let values = grads.iter().map(|v| v.value()).collect();
    (est.fro_sq_over_d.value().item(), block.params().with_values(values).unwrap())
}

/// Worst relative error of the penalty gradient against central differences
/// with the probes and `z*` frozen.
pub fn penalty_grad_error(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let block = contractive_block(seed);
        let (x, _) = parity_batch(seed);
        let z = deq_forward(&block, &x, &tight(Method::Broyden)).unwrap().z_star;
        let (_, grad) = penalty_and_grad(&block, &z, &x, 3, seed);
        let fd = finite_difference_grad(
            |t| Ok(penalty_and_grad(&with_params(&block, t), &z, &x, 3, seed).0),
            &block.params().flatten(),
            1e-6,
        )
        .unwrap();
        worst = worst.max(relative_error(&grad.flatten(), &fd, 1e-12));
    }
    worst
}

// ---------------------------------------------------------------- solver contracts

/// `f(z) = Az + b` with `‖A‖₂ ≤ 0.5`.
pub fn affine_system(rng: &mut impl Rng, d: usize) -> (Tensor, Tensor) {
    let a = gaussian_matrix(rng, d, d, 1.0);
    let a = a.scale(0.5 / sigma_max(&a).unwrap());
    let b = gaussian_matrix(rng, d, 1, 1.0);
    (a, b)
}

pub fn affine_map<'a>(a: &'a Tensor, b: &'a Tensor) -> impl FnMut(&Tensor) -> deq_core::Result<Tensor> + 'a {
    move |z: &Tensor| a.matmul(z)?.add(b)
}

pub struct BroydenReport {
    pub worst_residual: f64,
    pub worst_nfe: usize,
    pub failures: usize,
}

pub fn broyden_affine(systems: usize, d: usize, seed: u64) -> BroydenReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 2 * d + 2;
    let cfg = SolverConfig::new(Method::Broyden, 1e-10, cap);
    let mut rep = BroydenReport {
        worst_residual: 0.0,
        worst_nfe: 0,
        failures: 0,
    };
    for _ in 0..systems {
        let (a, b) = affine_system(&mut rng, d);
        let r = broyden_solve(affine_map(&a, &b), &Tensor::zeros(&[d, 1]), &cfg).unwrap();
        let fz = a.matmul(&r.z_star).unwrap().add(&b).unwrap();
        let res = deq_core::solvers::rel_residual(&r.z_star, &fz);
        rep.worst_residual = rep.worst_residual.max(res);
        rep.worst_nfe = rep.worst_nfe.max(r.nfe);
        if !(res <= 1e-10 && r.converged) {
            rep.failures += 1;
        }
    }
    rep
}

/// Largest difference between Anderson (`m = 1`, `β = 1`) and Picard iterates
/// on a nonlinear map, over every cap from 1 to 30.
pub fn anderson_picard_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian_matrix(&mut rng, 6, 6, 0.3);
    let x = gaussian_matrix(&mut rng, 6, 1, 1.0);
    let f = |z: &Tensor| Ok(w.matmul(z)?.add(&x)?.map(f64::tanh));
    let mut worst: f64 = 0.0;
    for cap in 1..=30 {
        let cfg = SolverConfig {
            anderson_m: 1,
            anderson_beta: 1.0,
            ..SolverConfig::new(Method::Anderson, 1e-300, cap)
        };
        let a = anderson_solve(f, &Tensor::zeros(&[6, 1]), &cfg).unwrap();
        let p = picard_solve(f, &Tensor::zeros(&[6, 1]), &SolverConfig { method: Method::Picard, ..cfg }).unwrap();
        for (za, zp) in a.z_star.data().iter().zip(p.z_star.data()) {
            worst = worst.max((za - zp).abs());
        }
        if a.nfe != p.nfe {
            return f64::INFINITY;
        }
        for (ra, rp) in a.rel_residual_trace.iter().zip(&p.rel_residual_trace) {
            worst = worst.max((ra - rp).abs());
        }
    }
    worst
}

/// Worst relative error of the backward solve `uᵀ(I − J) = vᵀ` against a
/// dense LU solve, over random `J` rescaled to radius `rho`.
pub fn backward_solve_error(trials: usize, d: usize, rho: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let j = gaussian_matrix(&mut rng, d, d, 1.0);
        let j = j.scale(rho / spectral_radius_dense(&j).unwrap());
        let v = gaussian_matrix(&mut rng, d, 1, 1.0).reshape(&[d]).unwrap();
        let cfg = SolverConfig::new(Method::Broyden, 1e-13, 200);
        let u = linear_backward_solve(matrix_vjp(&j), &v, &cfg).unwrap().z_star;
        let jm = DMatrix::from_row_slice(d, d, j.data());
        let lhs = (DMatrix::identity(d, d) - jm).transpose();
        let exact = lhs.lu().solve(&DVector::from_column_slice(v.data())).unwrap();
        let exact = Tensor::vector(exact.as_slice().to_vec());
        worst = worst.max(relative_error(&u, &exact, 1e-300));
    }
    worst
}

// ---------------------------------------------------------------- synthetic runs

pub const GAMMAS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

pub fn sweep_config(gamma: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.label = format!("gamma{gamma}");
    cfg.train.reg.gamma = deq_core::jacreg::GammaSchedule::Constant(gamma);
    cfg
}

pub fn run_sweep(root: &Path) -> Vec<RunArtifacts> {
    GAMMAS
        .iter()
        .map(|&g| run_experiment(&sweep_config(g), root, |_| {}).unwrap())
        .collect()
}

pub fn sweep_checksums(runs: &[RunArtifacts]) -> Vec<std::collections::BTreeMap<String, String>> {
    runs.iter().map(|r| checksums(&r.dir).unwrap()).collect()
}
