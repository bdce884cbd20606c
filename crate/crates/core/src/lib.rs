//! Continued self-supervised pre-training with a frozen teacher and a
//! cross-domain attention pre-training head, at desk scale.
//!
//! The crate is generic over the scalar type (see [`Scalar`]); the
//! aliases below fix it to `f64`, which is what the experiments use.

pub mod backbone;
pub mod datagen;
pub mod dataset;
pub mod downstream;
pub mod error;
pub mod head;
pub mod scalar;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Adam = tensor::Adam<f64>;
pub type ParamSet = tensor::ParamSet<f64>;
