//! Asymmetric encoder/decoder layer pruning for T5-style seq2seq models.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common concrete instantiations.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Weights64 = model::ModelWeights<f64>;
pub type Weights32 = model::ModelWeights<f32>;
pub type Tape64 = autodiff::Tape<f64>;
