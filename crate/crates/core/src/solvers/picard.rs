use super::{SolverConfig, SolverResult, Tracker};
use crate::error::Result;
use crate::tensor::Tensor;

/// Plain fixed-point iteration `z ← f(z)`.
pub fn picard_solve<F>(f: F, z0: &Tensor, cfg: &SolverConfig) -> Result<SolverResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut tracker = Tracker::new(f);
    let mut z = z0.clone();
    loop {
        let (fz, r) = tracker.eval(&z)?;
        if r <= cfg.eps {
            return Ok(tracker.finish(z, true));
        }
        if tracker.nfe >= cfg.max_nfe {
            return Ok(tracker.finish(fz, false));
        }
        z = fz;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{Method, StopReason};

    fn affine(a: f64, b: f64) -> impl FnMut(&Tensor) -> Result<Tensor> {
        move |z: &Tensor| Ok(z.map(|v| a * v + b))
    }

    #[test]
    fn affine_contraction() {
        let cfg = SolverConfig::new(Method::Picard, 1e-3, 100);
        let res = picard_solve(affine(0.5, 1.0), &Tensor::scalar(0.0), &cfg).unwrap();
        assert!(res.converged);
        assert!((res.z_star.item() - 2.0).abs() < 1e-2);
        assert_eq!(res.nfe, res.rel_residual_trace.len());
    }

    #[test]
    fn trace_follows_closed_form() {
        // z_k = 1 − 0.9^k, f(z_k) = 1 − 0.9^{k+1}
        let cfg = SolverConfig::new(Method::Picard, 1e-10, 400);
        let res = picard_solve(affine(0.9, 0.1), &Tensor::scalar(0.0), &cfg).unwrap();
        for (k, r) in res.rel_residual_trace.iter().enumerate() {
            let p = 0.9f64.powi(k as i32);
            let expected = 0.1 * p / (1.0 - 0.9 * p);
            assert!((r - expected).abs() <= 1e-12 * expected.max(1e-3), "k={k}: {r} vs {expected}");
        }
        let t = &res.rel_residual_trace;
        let tail = &t[130..];
        for w in tail.windows(2) {
            assert!((w[1] / w[0] - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn expansive_map_hits_cap() {
        let cfg = SolverConfig::new(Method::Picard, 1e-3, 10);
        let res = picard_solve(affine(2.0, 1.0), &Tensor::scalar(0.0), &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.stop_reason, StopReason::NfeCap);
        assert_eq!(res.nfe, 10);
        // the returned value is f applied ten times to 0
        assert_eq!(res.z_star.item(), 1023.0);
    }

    #[test]
    fn overflow_is_divergence() {
        let cfg = SolverConfig::new(Method::Picard, 1e-3, 5000);
        let err = picard_solve(affine(1e10, 1.0), &Tensor::scalar(0.0), &cfg).unwrap_err();
        match err {
            crate::Error::Diverged { nfe, trace } => {
                assert!(nfe > 1);
                assert!(!trace.is_empty());
            }
            other => panic!("unexpected {other}"),
        }
    }
}
