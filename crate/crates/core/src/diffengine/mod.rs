//! Reverse-mode differentiation over dense blocks.
//!
//! [`Tape`] is the engine used by the models; [`Program`] is a small
//! s-expression front end over the same primitives, useful for tests and for
//! checking the engine against [`finite_difference_oracle`].

mod fd;
mod program;
mod tape;

pub use fd::{central_difference, finite_difference_oracle, grad_close, GradCheck};
pub use program::{backward, record_scalar, GradientResult, Inputs, Program, Recording};
pub use tape::{log_cosh, row_matvec, skew_apply, Tape, Unary, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("shape mismatch in `{op}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("output must be a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("non-finite evaluation perturbing `{input}` at coordinate {index}")]
    NonFinite { input: String, index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
