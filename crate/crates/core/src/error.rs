use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("seed shape {seed:?} does not match root shape {root:?}")]
    SeedShape { seed: Vec<usize>, root: Vec<usize> },

    #[error("node {0} does not belong to this graph")]
    ForeignNode(usize),

    /// A solver produced a non-finite iterate. The residual trace up to the failure is kept.
    #[error("solver diverged after {nfe} evaluations (last residual {last:?})", last = trace.last())]
    Diverged { nfe: usize, trace: Vec<f64> },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("dense Jacobian of dimension {d} exceeds the limit of {max}")]
    DimensionGuard { d: usize, max: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("training aborted after {consecutive} consecutive failed steps at step {step}")]
    TrainingDiverged { step: usize, consecutive: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
