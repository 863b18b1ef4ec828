use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deq_core::experiment::{hard_stop_solver, load_model, run_experiment, CONFIG_FILE, DATA_FILE};
use deq_core::jacreg::{column_sum_approx_check, counterexample_matrix, frobenius, matrix_power_radius, GammaSchedule};
use deq_core::solvers::{Method, SolverConfig};
use deq_core::train::{
    column, evaluate, evaluate_reference, fmt_f64, gen_synthetic, jacobian_diagnostics, DataConfig, LinearSign,
    SyntheticDataset,
};
use deq_core::{RunConfig, RunSummary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "deq", version, about = "Equilibrium models with Jacobian regularization on the synthetic task")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use `+5x` for the linear term instead of `-5x`.
        #[arg(long)]
        sign_appendix: bool,
    },
    /// Train one configuration into a content-addressed run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "DEQ_OUT_ROOT", default_value = "runs")]
        out_root: PathBuf,
    },
    /// Train the same configuration for several regularization strengths.
    Sweep {
        /// Base configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 4.0])]
        gammas: Vec<f64>,
        /// Run every strength as its own process at the same time.
        #[arg(long)]
        parallel: bool,
        #[arg(long, env = "DEQ_OUT_ROOT", default_value = "runs")]
        out_root: PathBuf,
    },
    /// Validation MSE when inference stops after `K` evaluations.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        nfe_cap: u64,
        #[arg(long, default_value = "picard")]
        solver: Method,
        /// Dataset CSV; defaults to the one next to the model.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-point Jacobian norm and spectral radius at the equilibrium.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        power_iters: usize,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData {
            seed,
            out,
            sign_appendix,
        } => gen_data(seed, &out, sign_appendix),
        Cmd::Train { config, out_root } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train(&cfg, &out_root)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Sweep {
            config,
            gammas,
            parallel,
            out_root,
        } => sweep(config.as_deref(), &gammas, parallel, &out_root),
        Cmd::Eval {
            model,
            nfe_cap,
            solver,
            data,
        } => eval(&model, nfe_cap as usize, solver, data.as_deref()),
        Cmd::Diagnose {
            model,
            data,
            out,
            power_iters,
        } => diagnose(&model, data.as_deref(), out.as_deref(), power_iters),
    }
}

fn gen_data(seed: u64, out: &Path, sign_appendix: bool) -> Result<()> {
    let cfg = DataConfig {
        sign: if sign_appendix {
            LinearSign::Plus
        } else {
            LinearSign::Minus
        },
        ..DataConfig::with_seed(seed)
    };
    let data = gen_synthetic(&cfg);
    data.write_csv(out)?;
    let ys: Vec<f64> = data.train_y.iter().chain(&data.valid_y).copied().collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
    println!(
        "wrote {} pairs ({} train, {} valid) to {}",
        data.len(),
        data.train_x.len(),
        data.valid_x.len(),
        out.display()
    );
    println!("x in [{}, {}], y mean {mean:.4} std {std:.4}", cfg.x_min, cfg.x_max);
    Ok(())
}

fn train(cfg: &RunConfig, out_root: &Path) -> Result<RunSummary> {
    eprintln!("run {} -> {}", cfg.label, cfg.run_dir(out_root).display());
    let art = run_experiment(cfg, out_root, |e| {
        eprintln!(
            "epoch {:>3} loss {:.5} fwd_res {:.3e} fwd_nfe {:.2} valid_mse {}",
            e.epoch,
            e.mean_task_loss,
            e.mean_fwd_rel_residual,
            e.mean_fwd_nfe,
            e.valid_mse.map(|v| format!("{v:.5}")).unwrap_or_default()
        )
    })?;
    if let Some(reason) = &art.summary.aborted {
        eprintln!("aborted: {reason}");
    }
    Ok(art.summary)
}

fn sweep(config: Option<&Path>, gammas: &[f64], parallel: bool, out_root: &Path) -> Result<()> {
    let base = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let configs: Vec<RunConfig> = gammas
        .iter()
        .map(|&g| {
            let mut c = base.clone();
            c.label = format!("{}-gamma{g}", base.label);
            c.train.reg.gamma = GammaSchedule::Constant(g);
            c
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let summaries = if parallel {
        sweep_processes(&configs, out_root)?
    } else {
        configs.iter().map(|c| train(c, out_root)).collect::<Result<_>>()?
    };
    println!("gamma,run_dir,final_valid_mse,mean_picard_nfe,final_fro_oracle");
    for (c, s) in configs.iter().zip(&summaries) {
        println!(
            "{},{},{},{},{}",
            c.train.reg.gamma.at(0, 1),
            c.run_dir(out_root).display(),
            fmt_f64(s.final_valid_mse),
            fmt_f64(s.mean_picard_nfe),
            s.final_fro_oracle.map(fmt_f64).unwrap_or_default()
        );
    }
    Ok(())
}

fn sweep_processes(configs: &[RunConfig], out_root: &Path) -> Result<Vec<RunSummary>> {
    fs::create_dir_all(out_root).with_context(|| format!("creating {}", out_root.display()))?;
    let exe = std::env::current_exe().context("locating the deq executable")?;
    let mut children = Vec::new();
    for c in configs {
        let path = out_root.join(format!("{}.json", c.label));
        fs::write(&path, c.to_json()).with_context(|| format!("writing {}", path.display()))?;
        let child = Command::new(&exe)
            .arg("train")
            .arg("--config")
            .arg(&path)
            .arg("--out-root")
            .arg(out_root)
            .stdout(std::process::Stdio::piped())
            .spawn()
            .with_context(|| format!("starting run {}", c.label))?;
        children.push((c, child));
    }
    let mut out = Vec::new();
    for (c, child) in children {
        let res = child.wait_with_output().with_context(|| format!("waiting for run {}", c.label))?;
        if !res.status.success() {
            bail!("run {} failed with {}", c.label, res.status);
        }
        let summary: RunSummary =
            serde_json::from_slice(&res.stdout).with_context(|| format!("reading summary of run {}", c.label))?;
        out.push(summary);
    }
    Ok(out)
}

/// The run configuration stored next to a model, if any.
fn sibling_config(model: &Path) -> Result<Option<RunConfig>> {
    let path = model.with_file_name(CONFIG_FILE);
    if path.exists() {
        Ok(Some(RunConfig::load(&path)?))
    } else {
        Ok(None)
    }
}

fn load_valid(model: &Path, data: Option<&Path>) -> Result<SyntheticDataset> {
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| model.with_file_name(DATA_FILE));
    let set = SyntheticDataset::read_csv(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    if set.valid_x.is_empty() {
        bail!("{} has no validation rows", path.display());
    }
    Ok(set)
}

#[derive(Serialize)]
struct EvalOutput {
    model: PathBuf,
    solver: Method,
    nfe_cap: usize,
    n: usize,
    mse: f64,
    mean_nfe: f64,
    mean_rel_residual: f64,
    max_rel_residual: f64,
    converged_fraction: f64,
    unconstrained_mse: f64,
}

fn eval(model_path: &Path, k: usize, solver: Method, data: Option<&Path>) -> Result<()> {
    let model = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let run_cfg = sibling_config(model_path)?.unwrap_or_default();
    let set = load_valid(model_path, data)?;
    let (vx, vy) = (column(&set.valid_x), column(&set.valid_y));
    let cfg = SolverConfig {
        method: solver,
        ..hard_stop_solver(&run_cfg.eval, k)
    };
    let r = evaluate(&model, &vx, &vy, &cfg)?;
    let exact = evaluate_reference(&model, &vx, &vy, &run_cfg.train.reference)?;
    let out = EvalOutput {
        model: model_path.to_path_buf(),
        solver,
        nfe_cap: k,
        n: r.n,
        mse: r.mse,
        mean_nfe: r.mean_nfe,
        mean_rel_residual: r.mean_rel_residual,
        max_rel_residual: r.max_rel_residual,
        converged_fraction: r.converged_fraction,
        unconstrained_mse: exact.mse,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn counterexample_check() -> Result<String> {
    let j = counterexample_matrix();
    let l = column_sum_approx_check(&j, 0.0)?;
    let rho = matrix_power_radius(&j, 500, 1e-12, &mut ChaCha8Rng::seed_from_u64(0))?.rho;
    let fro = frobenius(&j);
    let ok = l == 0.0 && (rho - 4.0).abs() <= 1e-6 && fro == 4.0;
    Ok(format!(
        "counterexample self-check J=[[2,-2],[-2,2]]: L={l} rho={rho:.6} |J|_F={fro} {}",
        if ok { "ok" } else { "MISMATCH" }
    ))
}

fn diagnose(model_path: &Path, data: Option<&Path>, out: Option<&Path>, power_iters: usize) -> Result<()> {
    let check = counterexample_check()?;
    let model = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let run_cfg = sibling_config(model_path)?.unwrap_or_default();
    let set = load_valid(model_path, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run_cfg.train.seed);
    let diag = jacobian_diagnostics(&model, &column(&set.valid_x), &run_cfg.train.reference, power_iters, &mut rng)?;
    let mut csv = String::from("x,z_star,fro,rho_dense,rho_power,power_converged,rel_residual\n");
    for p in &diag.points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_f64(p.x[0]),
            fmt_f64(p.z_star[0]),
            fmt_f64(p.fro),
            fmt_f64(p.rho_dense),
            fmt_f64(p.rho_power),
            u8::from(p.power_converged),
            fmt_f64(p.rel_residual)
        ));
    }
    let summary = format!(
        "{} points: mean |J|_F {:.6}, mean rho {:.6}, max rho {:.6}",
        diag.points.len(),
        diag.fro_mean,
        diag.rho_power_mean,
        diag.rho_dense_max
    );
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("{check}");
            println!("{summary}");
            println!("wrote {}", path.display());
        }
        None => {
            eprintln!("{check}");
            eprintln!("{summary}");
            std::io::stdout().write_all(csv.as_bytes())?;
        }
    }
    Ok(())
}
