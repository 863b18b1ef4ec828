//! Deep equilibrium layers with implicit differentiation and Jacobian regularization.

pub mod autodiff;
pub mod config;
pub mod deq;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod jacreg;
pub mod solvers;
pub mod tensor;
pub mod train;

pub use autodiff::{GradMap, Graph, NodeId, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use config::{EvalConfig, RunConfig};
pub use experiment::{run_experiment, RunArtifacts, RunSummary};
