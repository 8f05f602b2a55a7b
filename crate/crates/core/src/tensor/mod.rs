//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every layer primitive used by the autoencoder, the transformer and the
//! LSTM baseline lives here. Values are stored as `f32` in training; the same
//! code runs on `f64` for gradient checks.

mod conv;
mod real;
mod tape;
mod value;

use thiserror::Error;

pub use real::Real;
pub use tape::{Tape, Var};
pub use value::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any value that requires a gradient")]
    NoGradientPath,
}
