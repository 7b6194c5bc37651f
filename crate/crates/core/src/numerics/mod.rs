//! Dense tensor kernels with hand-written backward passes, a reverse-mode
//! tape over them, and a finite-difference gradient checker.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamSet};
pub use tape::{BackwardFault, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("pool error: {0}")]
    Pool(String),
    #[error("label {gold} out of range for {classes} classes")]
    Label { gold: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
