//! Jacobian regularization: a Hutchinson estimate of `‖J_f(z*)‖²_F` added to
//! the task loss, plus dense oracles for checking it.
//!
//! `tr(JJᵀ) = E[‖εᵀJ‖²]` for `ε ~ N(0, I)`, and every sample costs one VJP.
//! The penalty `γ · Σₘ ‖εₘᵀJ‖² / (M·d)` is gated by `τ ~ Bernoulli(p)` and is
//! differentiated with respect to the layer parameters by running reverse
//! mode over the recorded VJP.

mod oracle;

pub use oracle::{
    column_sum_approx_check, counterexample_matrix, dense_jacobian, frobenius, matrix_power_radius,
    sigma_max, spectral_radius_dense, spectral_radius_power, PowerEstimate, DENSE_LIMIT,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::deq::Linearization;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    #[default]
    Gaussian,
    Rademacher,
}

impl Probe {
    pub fn draw(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Probe::Gaussian => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            Probe::Rademacher => (0..n)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        };
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// Regularization strength over training: a constant or a linear ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSchedule {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule::Constant(0.0)
    }
}

impl GammaSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            GammaSchedule::Constant(g) => g,
            GammaSchedule::Linear { start, end } => {
                let t = if total_steps <= 1 {
                    1.0
                } else {
                    (step as f64 / (total_steps - 1) as f64).min(1.0)
                };
                start + (end - start) * t
            }
        }
    }

    fn endpoints(&self) -> Vec<f64> {
        match *self {
            GammaSchedule::Constant(g) => vec![g],
            GammaSchedule::Linear { start, end } => vec![start, end],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub gamma: GammaSchedule,
    /// Probability `p` that the penalty is applied on a given step.
    pub prob: f64,
    /// Hutchinson samples `M` per application.
    pub m_samples: usize,
    pub rng_seed: u64,
    pub probe: Probe,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            gamma: GammaSchedule::Constant(0.0),
            prob: 0.4,
            m_samples: 1,
            rng_seed: 0,
            probe: Probe::Gaussian,
        }
    }
}

impl RegConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for g in self.gamma.endpoints() {
            if !g.is_finite() || g < 0.0 {
                out.push(format!("{prefix}.gamma must be finite and non-negative, got {g}"));
            }
        }
        if !(0.0..=1.0).contains(&self.prob) {
            out.push(format!("{prefix}.prob must lie in [0, 1], got {}", self.prob));
        }
        if self.m_samples < 1 {
            out.push(format!("{prefix}.m_samples must be at least 1"));
        }
        out
    }
}

pub struct JacobianEstimate<'g> {
    /// `Σₘ ‖εₘᵀJ‖² / (M·d)`, differentiable.
    pub fro_sq_over_d: Var<'g>,
    pub samples_used: usize,
}

fn check_samples(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig(vec!["Hutchinson sample count must be at least 1".into()]));
    }
    Ok(())
}

/// Differentiable Hutchinson estimate of `‖J‖²_F / d`.
///
/// `vjp` must return `εᵀJ` as a graph value; `shape` is the shape of `z`.
pub fn hutchinson_fro_sq<'g, F>(
    mut vjp: F,
    shape: &[usize],
    m_samples: usize,
    probe: Probe,
    rng: &mut impl Rng,
) -> Result<JacobianEstimate<'g>>
where
    F: FnMut(&Tensor) -> Result<Var<'g>>,
{
    check_samples(m_samples)?;
    let d: usize = shape.iter().product();
    let mut acc: Option<Var<'g>> = None;
    for _ in 0..m_samples {
        let eps = probe.draw(shape, rng);
        let sq = vjp(&eps)?.square()?.sum()?;
        acc = Some(match acc {
            None => sq,
            Some(a) => a.add(&sq)?,
        });
    }
    let total = acc.expect("at least one sample");
    Ok(JacobianEstimate {
        fro_sq_over_d: total.scale(1.0 / (m_samples * d) as f64)?,
        samples_used: m_samples,
    })
}

/// The same estimator on plain tensors, for monitoring and Monte-Carlo checks.
/// Returns `Σₘ ‖εₘᵀJ‖² / M` (not divided by `d`).
pub fn hutchinson_trace<F>(
    mut vjp: F,
    shape: &[usize],
    m_samples: usize,
    probe: Probe,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    check_samples(m_samples)?;
    let mut acc = 0.0;
    for _ in 0..m_samples {
        let eps = probe.draw(shape, rng);
        let w = vjp(&eps)?;
        acc += w.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(acc / m_samples as f64)
}

pub struct RegularizedLoss<'g> {
    /// Task loss plus the gated, scaled penalty.
    pub total: Var<'g>,
    /// The Bernoulli gate for this step.
    pub tau: bool,
    /// `γ` in effect.
    pub gamma: f64,
    /// The unscaled estimate `Σₘ‖εₘᵀJ‖²/(M·d)`, present when the gate was open.
    pub penalty: Option<Var<'g>>,
}

impl RegularizedLoss<'_> {
    pub fn penalty_value(&self) -> Option<f64> {
        self.penalty.map(|p| p.value().item())
    }
}

/// `L = L_task + τ·γ·Σₘ‖εₘᵀJ(z*)‖²/(M·d)` with `τ ~ Bernoulli(p)`.
///
/// With `γ = 0` nothing is drawn and `task_loss` itself is returned.
pub fn regularized_loss<'g>(
    task_loss: Var<'g>,
    lin: &Linearization<'g>,
    gamma: f64,
    cfg: &RegConfig,
    rng: &mut impl Rng,
) -> Result<RegularizedLoss<'g>> {
    let skip = RegularizedLoss {
        total: task_loss,
        tau: false,
        gamma,
        penalty: None,
    };
    if gamma == 0.0 {
        return Ok(skip);
    }
    let tau = rng.random_bool(cfg.prob);
    if !tau {
        return Ok(skip);
    }
    let est = hutchinson_fro_sq(|e| lin.vjp(e), &lin.z_shape(), cfg.m_samples, cfg.probe, rng)?;
    let total = task_loss.add(&est.fro_sq_over_d.scale(gamma)?)?;
    Ok(RegularizedLoss {
        total,
        tau: true,
        gamma,
        penalty: Some(est.fro_sq_over_d),
    })
}
