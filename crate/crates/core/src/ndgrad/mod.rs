//! Minimal dense-array reverse-mode automatic differentiation.
//!
//! Arrays are row-major `f64`. Binary elementwise ops broadcast only when one
//! operand's shape is a trailing suffix of the other's (a leading batch axis);
//! anything else goes through an explicit [`Tape::expand`].

mod checkpoint;
mod params;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{BoundParams, Param, ParamStore};
pub use tape::{Grads, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {value} at element {index}; clamp before taking logs")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{0}")]
    BadShape(String),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
