//! Multi-organ segmentation trained jointly on fully labeled, partially
//! labeled and unlabeled images.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for oracles and gradient checks); the aliases below fix the common
//! instantiations.

pub mod augment;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod run;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Prediction32 = model::Prediction<f32>;
pub type Prediction64 = model::Prediction<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
