//! Zero-shot post-training quantization for small batch-normalized CNNs.
//!
//! The crate distills calibration images from a pretrained model's
//! batch-norm statistics and then quantizes the model block by block,
//! learning weight step sizes, soft rounding variables and activation step
//! sizes jointly.

pub mod distill;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use scalar::{DType, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
