//! Twin variational autoencoders with a shared latent space and auxiliary
//! depth / segmentation decoders, for transferring perception tasks learned on
//! simulated imagery to real imagery.

pub mod data;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::ModelBundle<f32>;
pub type Model64 = model::ModelBundle<f64>;
