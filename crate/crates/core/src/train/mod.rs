//! The synthetic regression experiment: data, optimizer, training loop,
//! evaluation under solver budgets and surface dumps.

mod data;
mod eval;
mod io;
mod optim;
mod records;
mod surface;
mod trainer;

pub use data::{column, gen_synthetic, target, DataConfig, LinearSign, SyntheticDataset};
pub use eval::{
    evaluate, evaluate_reference, jacobian_diagnostics, predict, reference_solve, solve_one, EvalReport, JacobianDiagnostics, JacobianPoint};
pub use io::{equilibrium_csv, fmt_f64, records_csv, surface_csv, traces_csv, RECORD_COLUMNS};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState, LrSchedule};
pub use records::{epoch_summaries, ls_slope, EpochSummary, TrainRecord};
pub use surface::{dump_surface, EquilibriumPoint, SurfaceDump, SurfacePoint, SurfaceSpec, Trace};
pub use trainer::{train_synthetic, Optimizer, TrainConfig, TrainRun};
