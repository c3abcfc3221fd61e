//! Camera-conditioned panoramic LiDAR range-image diffusion on CPU.
//!
//! The learnable stack (autograd, layers, CACM, GCMA, denoiser) is generic
//! over [`Scalar`] (`f32` or `f64`); geometry, synthetic data and metrics are
//! computed in `f64`.

pub mod autograd;
pub mod cacm;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod gcma;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod rangeview;
pub mod rng;
pub mod scalar;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
