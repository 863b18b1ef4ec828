use serde::{Deserialize, Serialize};

/// One optimizer step. Optional fields are absent on failed steps, and the
/// periodic diagnostics are absent between sampling points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: Option<f64>,
    pub penalty_value: Option<f64>,
    pub tau: bool,
    pub fwd_nfe: usize,
    pub bwd_nfe: usize,
    pub fwd_rel_residual: Option<f64>,
    pub bwd_rel_residual: Option<f64>,
    pub valid_mse: Option<f64>,
    pub fro_sq_oracle: Option<f64>,
    pub rho_estimate: Option<f64>,
    pub lr: f64,
}

impl TrainRecord {
    pub fn failed(&self) -> bool {
        self.task_loss.is_none()
    }
}

/// Per-epoch aggregates of a record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_task_loss: f64,
    pub mean_fwd_rel_residual: f64,
    pub mean_fwd_nfe: f64,
    pub failed_steps: usize,
    /// Last value recorded in the epoch.
    pub valid_mse: Option<f64>,
    pub fro_sq_oracle: Option<f64>,
    pub rho_estimate: Option<f64>,
}

pub fn epoch_summaries(records: &[TrainRecord]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let epoch = records[start].epoch;
        let end = records[start..]
            .iter()
            .position(|r| r.epoch != epoch)
            .map_or(records.len(), |k| start + k);
        let rs = &records[start..end];
        let ok: Vec<&TrainRecord> = rs.iter().filter(|r| !r.failed()).collect();
        let n = ok.len().max(1) as f64;
        let last = |f: fn(&TrainRecord) -> Option<f64>| rs.iter().rev().find_map(f);
        out.push(EpochSummary {
            epoch,
            mean_task_loss: ok.iter().filter_map(|r| r.task_loss).sum::<f64>() / n,
            mean_fwd_rel_residual: ok.iter().filter_map(|r| r.fwd_rel_residual).sum::<f64>() / n,
            mean_fwd_nfe: ok.iter().map(|r| r.fwd_nfe as f64).sum::<f64>() / n,
            failed_steps: rs.len() - ok.len(),
            valid_mse: last(|r| r.valid_mse),
            fro_sq_oracle: last(|r| r.fro_sq_oracle),
            rho_estimate: last(|r| r.rho_estimate),
        });
        start = end;
    }
    out
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
