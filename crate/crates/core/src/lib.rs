pub mod cli;
pub mod data;
pub mod diff;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod oracle;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type Graph64 = diff::Graph<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Params64 = model::ModelParams<f64>;
