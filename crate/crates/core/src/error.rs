use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested op.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {what} id {id} at position {position} exceeds table size {size}")]
    Index {
        what: &'static str,
        id: usize,
        position: usize,
        size: usize,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("data: {0}")]
    Data(String),

    #[error(
        "training diverged at step {step}: loss {loss:.4} exceeded {threshold:.4} \
         (initial loss {initial:.4}) for {window} consecutive steps"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        threshold: f64,
        window: usize,
    },

    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NanGradient { step: usize, param: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Whether the failure stems from user-supplied configuration rather than
    /// a runtime condition.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}
