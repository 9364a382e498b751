//! Causal motion diffusion at desk scale.

pub mod align;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod scalar;
pub mod vae;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type ParamTree32 = nn::ParamTree<f32>;
pub type ParamTree64 = nn::ParamTree<f64>;
pub type VaeParams32 = vae::VaeParams<f32>;
pub type DitParams32 = dit::DitParams<f32>;
