mod common;

use common::*;
use deq_core::autodiff::Graph;
use deq_core::deq::{deq_forward, LinearLayer, Linearization};
use deq_core::fd::{finite_difference_grad, relative_error};
use deq_core::jacreg::{
    column_sum_approx_check, counterexample_matrix, hutchinson_trace, matrix_power_radius, regularized_loss,
    spectral_radius_dense, GammaSchedule, Probe, RegConfig,
};
use deq_core::solvers::Method;
use deq_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn counterexample_reports_zero_loss_and_radius_four() {
    let c = counterexample();
    assert_eq!(c.column_loss, 0.0);
    assert!((c.rho - 4.0).abs() <= 1e-6);
    assert_eq!(c.fro, 4.0);
    let j = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]]);
    assert_eq!(column_sum_approx_check(&j, 0.0).unwrap(), 3.0);
    assert!((spectral_radius_dense(&j).unwrap() - 3.0).abs() < 1e-14);
}

#[test]
fn counterexample_trace_estimate() {
    let j = counterexample_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mean = hutchinson_trace(matrix_vjp(&j), &[2], 100_000, Probe::Gaussian, &mut rng).unwrap();
    assert!((mean - 16.0).abs() <= 0.16, "{mean}");
}

#[test]
fn estimator_std_scales_as_inverse_root_m() {
    let r = hutchinson_report(3, 100_000, 200, 8);
    assert!(r.worst_mean_error <= 0.01);
    for (m, s) in r.sample_counts.iter().zip(&r.normalized_std) {
        assert!((1.0 / 1.5..=1.5).contains(s), "M={m}: {s}");
    }
}

#[test]
fn bound_chain_holds() {
    assert_eq!(bound_chain_violations(300, 17), 0);
}

#[test]
fn power_method_matches_dense_on_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let a = gaussian_matrix(&mut rng, 8, 8, 1.0);
        let s = a.add(&a.transpose().unwrap()).unwrap().scale(0.5);
        let p = matrix_power_radius(&s, 5000, 1e-13, &mut rng).unwrap();
        let exact = spectral_radius_dense(&s).unwrap();
        assert!((p.rho - exact).abs() <= 1e-6, "{} vs {exact}", p.rho);
    }
}

#[test]
fn penalty_gradient_matches_fd_with_frozen_probe() {
    let worst = penalty_grad_error(0..5);
    assert!(worst <= 1e-5, "{worst:.2e}");
}

#[test]
fn linear_penalty_is_probe_norm_over_d() {
    // f(z; x) = Az: penalty ‖εᵀA‖²/d
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = gaussian_matrix(&mut rng, 3, 3, 0.5);
    let layer = LinearLayer::new(a.clone());
    let g = Graph::new();
    let z = gaussian_matrix(&mut rng, 1, 3, 1.0);
    let lin = Linearization::new(&layer, &g, &z, &Tensor::zeros(&[1, 3])).unwrap();
    let task = g.constant(Tensor::scalar(0.0));
    let cfg = RegConfig {
        gamma: GammaSchedule::Constant(1.0),
        prob: 1.0,
        m_samples: 1,
        ..Default::default()
    };
    let draw_seed = 33;
    let reg = regularized_loss(task, &lin, 1.0, &cfg, &mut ChaCha8Rng::seed_from_u64(draw_seed)).unwrap();
    assert!(reg.tau);

    // replay the draw: one Bernoulli, then the probe
    let mut replay = ChaCha8Rng::seed_from_u64(draw_seed);
    let _ = rand::Rng::random_bool(&mut replay, 1.0);
    let eps = Probe::Gaussian.draw(&[1, 3], &mut replay);
    // rows are samples, so f = z Aᵀ and εᵀJ is ε A
    let w = eps.matmul(&a).unwrap();
    let expect = w.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
    assert!((reg.penalty_value().unwrap() - expect).abs() < 1e-14);

    let grad = g.gradients(reg.total, None, &lin.params).unwrap()[0].value();
    let fd = finite_difference_grad(
        |t| {
            let l = LinearLayer::new(t.clone());
            let h = Graph::new();
            let lin = Linearization::new(&l, &h, &z, &Tensor::zeros(&[1, 3]))?;
            let task = h.constant(Tensor::scalar(0.0));
            let r = regularized_loss(task, &lin, 1.0, &cfg, &mut ChaCha8Rng::seed_from_u64(draw_seed))?;
            Ok(r.total.value().item())
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(relative_error(&grad, &fd, 1e-12) <= 1e-5);
}

#[test]
fn closed_gate_gradient_is_bitwise_unregularized() {
    let block = contractive_block(2);
    let (x, y) = parity_batch(2);
    let out = deq_forward(&block, &x, &tight(Method::Broyden)).unwrap();
    let grads = |prob: f64, gamma: f64| {
        let g = Graph::new();
        let lin = Linearization::at(&block, &g, &out).unwrap();
        let task = lin.out.mse(&g.constant(y.clone())).unwrap();
        let cfg = RegConfig {
            gamma: GammaSchedule::Constant(gamma),
            prob,
            ..Default::default()
        };
        let reg = regularized_loss(task, &lin, gamma, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!reg.tau);
        let gs = g.gradients(reg.total, None, &lin.params).unwrap();
        gs.iter().map(|v| v.value()).collect::<Vec<_>>()
    };
    assert_eq!(grads(0.0, 4.0), grads(0.0, 0.0));
    assert_eq!(grads(0.7, 0.0), grads(0.0, 0.0));
}
