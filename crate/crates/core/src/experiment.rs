//! One complete synthetic run: data, training, evaluation and every artifact
//! written into a content-addressed run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EvalConfig, RunConfig};
use crate::deq::{EquilibriumModel, ParamSet, SyntheticBlock};
use crate::error::{Error, Result};
use crate::jacreg::GammaSchedule;
use crate::solvers::SolverConfig;
use crate::train::{
    column, dump_surface, equilibrium_csv, evaluate, evaluate_reference, gen_synthetic, jacobian_diagnostics,
    ls_slope, records_csv, surface_csv, traces_csv, EpochSummary, EvalReport, SurfaceDump, SurfaceSpec,
    SyntheticDataset, TrainRun,
};

pub const MODEL_FILE: &str = "model.json";
pub const DATA_FILE: &str = "data.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Files whose checksums pin a run.
pub const CHECKSUMMED: [&str; 6] = [
    RECORDS_FILE,
    "epochs.csv",
    "eval.csv",
    "surface.csv",
    "equilibrium.csv",
    "traces.csv",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardStopRow {
    pub k: usize,
    pub mse: f64,
    pub mean_nfe: f64,
    pub converged_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub config_hash: String,
    pub gamma: GammaSchedule,
    pub steps: usize,
    pub failed_steps: usize,
    pub aborted: Option<String>,
    /// Validation MSE at the reference equilibrium after training.
    pub final_valid_mse: f64,
    /// Mean per-sample Picard NFE to the evaluation threshold.
    pub mean_picard_nfe: f64,
    pub picard_converged_fraction: f64,
    pub hard_stop: Vec<HardStopRow>,
    /// `√fro_sq_oracle` at the end of the first and of the last epoch.
    pub epoch1_fro_oracle: Option<f64>,
    pub final_fro_oracle: Option<f64>,
    /// Power-method `ρ(J(z*))` over the whole validation split.
    pub final_rho_mean: f64,
    pub rho_below_one_fraction: f64,
    /// Least-squares slope of the per-epoch mean final forward residual.
    pub fwd_residual_slope: f64,
    pub last_epoch_fwd_residual: f64,
    /// Picard steps to the evaluation threshold along each dumped trace.
    pub trace_steps_to_eps: Vec<(f64, Option<usize>)>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub run: TrainRun,
    pub dataset: SyntheticDataset,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn epochs_csv(epochs: &[EpochSummary]) -> String {
    use crate::train::fmt_f64;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut out = String::from(
        "epoch,mean_task_loss,mean_fwd_rel_residual,mean_fwd_nfe,failed_steps,valid_mse,fro_sq_oracle,rho_estimate\n",
    );
    for e in epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch,
            fmt_f64(e.mean_task_loss),
            fmt_f64(e.mean_fwd_rel_residual),
            fmt_f64(e.mean_fwd_nfe),
            e.failed_steps,
            opt(e.valid_mse),
            opt(e.fro_sq_oracle),
            opt(e.rho_estimate),
        ));
    }
    out
}

fn eval_csv(picard: &EvalReport, rows: &[HardStopRow]) -> String {
    use crate::train::fmt_f64;
    let mut out = String::from("solver,k,mse,mean_nfe,converged_fraction\n");
    out.push_str(&format!(
        "picard,,{},{},{}\n",
        fmt_f64(picard.mse),
        fmt_f64(picard.mean_nfe),
        fmt_f64(picard.converged_fraction)
    ));
    for r in rows {
        out.push_str(&format!(
            "hard_stop,{},{},{},{}\n",
            r.k,
            fmt_f64(r.mse),
            fmt_f64(r.mean_nfe),
            fmt_f64(r.converged_fraction)
        ));
    }
    out
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// The solver `eval.hard_stop` with its cap replaced by `k`.
pub fn hard_stop_solver(eval: &EvalConfig, k: usize) -> SolverConfig {
    SolverConfig {
        max_nfe: k,
        ..eval.hard_stop.clone()
    }
}

/// Surface over the data range with the configured resolution.
pub fn surface_for(model: &SyntheticBlock, data: &SyntheticDataset, cfg: &RunConfig) -> Result<SurfaceDump> {
    let ys = data.train_y.iter().chain(&data.valid_y);
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let spec = SurfaceSpec {
        x_list: linspace(cfg.data.x_min, cfg.data.x_max, cfg.eval.surface_x_points),
        z_range: (lo - 1.0, hi + 1.0),
        resolution: cfg.eval.surface_z_points,
        trace_xs: cfg.eval.trace_xs.clone(),
        trace_steps: cfg.eval.trace_steps,
        solver: cfg.train.reference.clone(),
    };
    dump_surface(model, &spec)
}

/// Trains, evaluates and writes `config.json`, `data.csv`, `records.csv`,
/// `epochs.csv`, `eval.csv`, `model.json`/`model.bin`, the surface files and
/// `summary.json` into [`RunConfig::run_dir`].
pub fn run_experiment(cfg: &RunConfig, root: &Path, on_epoch: impl FnMut(&EpochSummary)) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dir = cfg.run_dir(root);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir, CONFIG_FILE, &cfg.to_json())?;
    let data = gen_synthetic(&cfg.data);
    data.write_csv(&dir.join(DATA_FILE))?;

    let run = crate::train::train_synthetic(&cfg.train, &data, on_epoch)?;
    write(&dir, RECORDS_FILE, &records_csv(&run.records))?;
    let epochs = run.epochs();
    write(&dir, "epochs.csv", &epochs_csv(&epochs))?;
    let hash = cfg.hash();
    let meta = serde_json::json!({ "label": cfg.label, "config_hash": hash });
    run.model
        .params()
        .save(&dir.join(MODEL_FILE), run.model.kind(), meta)?;

    let vx = column(&data.valid_x);
    let vy = column(&data.valid_y);
    let picard = evaluate(&run.model, &vx, &vy, &cfg.eval.picard)?;
    let mut rows = Vec::new();
    for &k in &cfg.eval.budgets {
        let r = evaluate(&run.model, &vx, &vy, &hard_stop_solver(&cfg.eval, k))?;
        rows.push(HardStopRow {
            k,
            mse: r.mse,
            mean_nfe: r.mean_nfe,
            converged_fraction: r.converged_fraction,
        });
    }
    write(&dir, "eval.csv", &eval_csv(&picard, &rows))?;
    let reference = evaluate_reference(&run.model, &vx, &vy, &cfg.train.reference)?;

    let mut diag_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed);
    let diag = jacobian_diagnostics(&run.model, &vx, &cfg.train.reference, 200, &mut diag_rng)?;
    let below = diag.points.iter().filter(|p| p.rho_power < 1.0).count();

    let surface = surface_for(&run.model, &data, cfg)?;
    write(&dir, "surface.csv", &surface_csv(&surface))?;
    write(&dir, "equilibrium.csv", &equilibrium_csv(&surface))?;
    write(&dir, "traces.csv", &traces_csv(&surface))?;
    let eps = cfg.eval.picard.eps;
    let trace_steps_to_eps = surface
        .traces
        .iter()
        .map(|t| (t.x, t.points.iter().position(|p| p.2 <= eps).map(|i| i + 1)))
        .collect();

    let xs: Vec<f64> = epochs.iter().map(|e| e.epoch as f64).collect();
    let res: Vec<f64> = epochs.iter().map(|e| e.mean_fwd_rel_residual).collect();
    let fro_at = |e: Option<&EpochSummary>| e.and_then(|e| e.fro_sq_oracle).map(f64::sqrt);
    let summary = RunSummary {
        label: cfg.label.clone(),
        config_hash: hash,
        gamma: cfg.train.reg.gamma.clone(),
        steps: run.records.len(),
        failed_steps: run.events.iter().filter(|(_, m)| !m.starts_with("diagnostics")).count(),
        aborted: run.aborted.as_ref().map(|e| e.to_string()),
        final_valid_mse: reference.mse,
        mean_picard_nfe: picard.mean_nfe,
        picard_converged_fraction: picard.converged_fraction,
        hard_stop: rows,
        epoch1_fro_oracle: fro_at(epochs.first()),
        final_fro_oracle: fro_at(epochs.last()),
        final_rho_mean: diag.rho_power_mean,
        rho_below_one_fraction: below as f64 / diag.points.len().max(1) as f64,
        fwd_residual_slope: ls_slope(&xs, &res),
        last_epoch_fwd_residual: res.last().copied().unwrap_or(f64::NAN),
        trace_steps_to_eps,
    };
    write(
        &dir,
        SUMMARY_FILE,
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(RunArtifacts {
        dir,
        summary,
        run,
        dataset: data,
    })
}

/// SHA-256 of each file in [`CHECKSUMMED`] inside `dir`.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for name in CHECKSUMMED {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

/// Loads a trained synthetic block written by [`run_experiment`].
pub fn load_model(path: &Path) -> Result<SyntheticBlock> {
    let (kind, params, _) = ParamSet::load(path)?;
    if kind != SyntheticBlock::KIND {
        return Err(Error::format(path, format!("expected model kind {}, found {kind}", SyntheticBlock::KIND)));
    }
    SyntheticBlock::from_params(params)
}
