//! Minimal reverse-mode autodiff over dense tensors.
//!
//! A [`Graph`] is built per forward pass; parameters live in [`Tensor`]s
//! outside the graph and are copied in with [`Graph::param`].

mod conv;
mod graph;
mod layers;
mod optim;
#[allow(clippy::module_inception)]
mod tensor;

pub use conv::conv_out_dim;
pub use graph::{Graph, Var};
pub use layers::{BnMode, BnOutput};
pub use optim::{Adam, AdamState, LrSchedule, ScheduleKind};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("division by zero")]
    DivisionByZero,
    #[error("batch statistics over a single value have zero variance")]
    ZeroVariance,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
