//! Dense 64-bit tensors, a reverse-mode tape, the recognizer's neural
//! operators, Adam, and a central-difference gradient checker.

mod adam;
mod gemm;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use adam::{Adam, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use gemm::gemm;
pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use ops::{BiLstmParams, ResampleFactor};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("{0}")]
    Other(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
