//! Dense tensors, a reverse-mode tape and the layers built on it.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, rel_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamStore};
pub use tensor::{cross_entropy, linear, masked_softmax, rmsnorm, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no feasible action")]
    Infeasible,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
