//! Convex primitives, the layered energy and the hybrid feedforward hidden maps.

mod conjugate;
mod model;
mod primitive;

pub use conjugate::conjugate_numeric;
pub use model::{HiddenStates, HybridEbm, LayerDoc, LayerRows, LayerSpec, MatrixDoc, ModelDoc, ModelVars};
pub use primitive::{activation, primitive_value, ConvexPrimitive};

use thiserror::Error;

use crate::diffengine::DiffError;

/// Structural requirements for the hybrid invariance guarantees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    LinearVisible,
    BoundedFirstHidden,
    FeedforwardHidden,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::LinearVisible => "(i) linear visible layer: the visible primitive must be quadratic",
            Condition::BoundedFirstHidden => {
                "(ii) bounded first hidden layer: the first hidden primitive must be log_sum_exp or log_cosh"
            }
            Condition::FeedforwardHidden => "(iii) feedforward hidden maps",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("non-finite input at coordinate {index}")]
    NonFiniteInput { index: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("theorem condition violated: {0}")]
    Condition(Condition),
    #[error("non-finite value in layer {layer}: {what}")]
    NonFinite { layer: usize, what: &'static str },
    #[error("maximizer reached the search boundary (radius {radius}); enlarge the radius")]
    RadiusTooSmall { radius: f64 },
    #[error("malformed model document: {0}")]
    Document(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
