use thiserror::Error;

use crate::ndgrad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("joint {joint} of frame {frame} has non-positive camera depth {depth}")]
    Projection { frame: usize, joint: usize, depth: f64 },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("all aggregation weights are zero")]
    DegenerateWeights,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
