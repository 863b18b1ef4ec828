//! The training loop for the synthetic task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{column, SyntheticDataset};
use super::eval::{evaluate_reference, jacobian_diagnostics};
use super::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use super::records::{epoch_summaries, EpochSummary, TrainRecord};
use crate::autodiff::Graph;
use crate::deq::{deq_forward, implicit_grads, EquilibriumModel, Linearization, ParamSet, SyntheticBlock};
use crate::error::{Error, Result};
use crate::jacreg::{regularized_loss, RegConfig};
use crate::solvers::{Method, SolverConfig};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DIAG_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Drives initialization and batch order.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub hidden: usize,
    /// Standard deviation of the `N(0, σ²)` initialization (`σ² = 0.01`).
    pub init_std: f64,
    pub forward: SolverConfig,
    pub backward: SolverConfig,
    pub reg: RegConfig,
    /// Oracle diagnostics cadence in steps; they also run at every epoch end.
    pub diag_every: usize,
    /// Size of the fixed validation subset used by the diagnostics.
    pub diag_points: usize,
    /// Per-sample solver for validation MSE and diagnostics.
    pub reference: SolverConfig,
    pub max_consecutive_failures: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 50,
            batch_size: 64,
            optimizer: Optimizer::Adam,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
            hidden: SyntheticBlock::HIDDEN,
            init_std: 0.1,
            forward: SolverConfig::new(Method::Broyden, 1e-3, 6),
            backward: SolverConfig::new(Method::Broyden, 1e-4, 6),
            reg: RegConfig::default(),
            diag_every: 50,
            diag_points: 64,
            reference: SolverConfig::new(Method::Broyden, 1e-10, 100),
            max_consecutive_failures: 10,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("diag_every", self.diag_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                out.push(format!("{prefix}.{name} must be positive"));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            out.push(format!("{prefix}.lr must be positive, got {}", self.lr));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            out.push(format!("{prefix}.init_std must be finite and non-negative"));
        }
        out.extend(self.adam.problems(&format!("{prefix}.adam")));
        out.extend(self.forward.problems(&format!("{prefix}.forward")));
        out.extend(self.backward.problems(&format!("{prefix}.backward")));
        out.extend(self.reference.problems(&format!("{prefix}.reference")));
        out.extend(self.reg.problems(&format!("{prefix}.reg")));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("train");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: SyntheticBlock,
    pub records: Vec<TrainRecord>,
    /// Set when training stopped after too many consecutive failed steps.
    pub aborted: Option<Error>,
    /// Failed steps as `(step, reason)`.
    pub events: Vec<(usize, String)>,
}

impl TrainRun {
    pub fn epochs(&self) -> Vec<EpochSummary> {
        epoch_summaries(&self.records)
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct StepOutcome {
    grads: ParamSet,
    task_loss: f64,
    penalty: Option<f64>,
    tau: bool,
    fwd_nfe: usize,
    bwd_nfe: usize,
    fwd_res: f64,
    bwd_res: f64,
}

/// Forward solve, task MSE, gated penalty, IFT gradient of the task loss plus
/// the direct gradient of the penalty at fixed `z*`.
fn step_grads(
    model: &SyntheticBlock,
    x: &Tensor,
    y: &Tensor,
    gamma: f64,
    cfg: &TrainConfig,
    reg_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let out = deq_forward(model, x, &cfg.forward)?;
    let graph = Graph::new();
    let lin = Linearization::at(model, &graph, &out)?;
    let yv = graph.constant(y.clone());
    let task = lin.z.mse(&yv)?;
    let dl_dz = graph.gradients(task, None, &[lin.z])?[0].value();
    let reg = regularized_loss(task, &lin, gamma, &cfg.reg, reg_rng)?;
    let ift = implicit_grads(model, &lin, &dl_dz, &cfg.backward)?;
    let mut grads = ift.params;
    if let Some(pen) = reg.penalty {
        let scaled = pen.scale(gamma)?;
        let direct = graph.gradients(scaled, None, &lin.params)?;
        let direct = model.params().with_values(direct.iter().map(|v| v.value()).collect())?;
        grads = grads.add_scaled(1.0, &direct)?;
    }
    Ok(StepOutcome {
        grads,
        task_loss: task.value().item(),
        penalty: reg.penalty_value(),
        tau: reg.tau,
        fwd_nfe: out.forward.nfe,
        bwd_nfe: ift.backward.nfe,
        fwd_res: out.forward.final_residual(),
        bwd_res: ift.backward.final_residual(),
    })
}

/// Trains a [`SyntheticBlock`] on the training split. `on_epoch` sees each
/// finished epoch.
pub fn train_synthetic(
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainRun> {
    cfg.validate()?;
    let n = data.train_x.len();
    if n == 0 || data.train_y.len() != n || data.valid_x.is_empty() {
        return Err(Error::LengthMismatch("training split must be non-empty with one target per input, validation split non-empty".into()));
    }
    let mut model = SyntheticBlock::init(cfg.hidden, cfg.init_std, &mut rng(cfg.seed, INIT_STREAM));
    let mut shuffle = rng(cfg.seed, SHUFFLE_STREAM);
    let mut diag_rng = rng(cfg.seed, DIAG_STREAM);
    let mut reg_rng = ChaCha8Rng::seed_from_u64(cfg.reg.rng_seed);
    let mut adam = AdamState::new(model.params());

    let valid_x = column(&data.valid_x);
    let valid_y = column(&data.valid_y);
    let k = cfg.diag_points.min(data.valid_x.len());
    let diag_x = column(&data.valid_x[..k]);

    let per_epoch = cfg.steps_per_epoch(n);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(total);
    let mut events = Vec::new();
    let mut consecutive = 0usize;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cfg.lr_schedule.at(step, total, cfg.lr);
            let gamma = cfg.reg.gamma.at(step, total);
            let xb: Vec<f64> = chunk.iter().map(|&i| data.train_x[i]).collect();
            let yb: Vec<f64> = chunk.iter().map(|&i| data.train_y[i]).collect();
            let mut rec = TrainRecord {
                step,
                epoch,
                task_loss: None,
                penalty_value: None,
                tau: false,
                fwd_nfe: 0,
                bwd_nfe: 0,
                fwd_rel_residual: None,
                bwd_rel_residual: None,
                valid_mse: None,
                fro_sq_oracle: None,
                rho_estimate: None,
                lr,
            };
            let outcome = step_grads(&model, &column(&xb), &column(&yb), gamma, cfg, &mut reg_rng)
                .and_then(|o| adam_step(model.params_mut(), &o.grads, &mut adam, lr, &cfg.adam).map(|()| o));
            match outcome {
                Ok(o) => {
                    consecutive = 0;
                    rec.task_loss = Some(o.task_loss);
                    rec.penalty_value = o.penalty;
                    rec.tau = o.tau;
                    rec.fwd_nfe = o.fwd_nfe;
                    rec.bwd_nfe = o.bwd_nfe;
                    rec.fwd_rel_residual = Some(o.fwd_res);
                    rec.bwd_rel_residual = Some(o.bwd_res);
                }
                Err(e) => {
                    consecutive += 1;
                    if let Error::Diverged { nfe, .. } = &e {
                        rec.fwd_nfe = *nfe;
                    }
                    events.push((step, e.to_string()));
                    if consecutive > cfg.max_consecutive_failures {
                        records.push(rec);
                        return Ok(TrainRun {
                            model,
                            records,
                            aborted: Some(Error::TrainingDiverged { step, consecutive }),
                            events,
                        });
                    }
                }
            }

            let epoch_end = b + 1 == per_epoch;
            if (step + 1) % cfg.diag_every == 0 || epoch_end {
                match jacobian_diagnostics(&model, &diag_x, &cfg.reference, 200, &mut diag_rng) {
                    Ok(d) => {
                        rec.fro_sq_oracle = Some(d.fro_sq_mean);
                        rec.rho_estimate = Some(d.rho_power_mean);
                    }
                    Err(e) => events.push((step, format!("diagnostics: {e}"))),
                }
            }
            if epoch_end {
                rec.valid_mse = Some(evaluate_reference(&model, &valid_x, &valid_y, &cfg.reference)?.mse);
            }
            records.push(rec);
            step += 1;
        }
        if let Some(s) = epoch_summaries(&records).last() {
            on_epoch(s);
        }
    }
    Ok(TrainRun {
        model,
        records,
        aborted: None,
        events,
    })
}
