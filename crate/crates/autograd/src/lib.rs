//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a tape ([`Graph`]) of 2-D and 4-D
//! tensor operations sufficient for conformer encoders, transformer decoders,
//! and convolutional frontends, plus an Adam optimizer and a finite-difference
//! gradient checker. Everything runs single-threaded in a fixed order, so the
//! same inputs always produce bitwise-identical outputs.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{log_sum_exp, sigmoid, Conv3dSpec, Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;
