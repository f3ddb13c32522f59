//! Post-training quantization with jointly learned step sizes and soft
//! rounding, reconstructed block by block.

pub mod model;
pub mod primitives;
pub mod recon;
mod store;

pub use model::{ActQuant, QLayer, QuantMode, QuantPolicy, QuantizedModel, Trainable, WeightQuant};
pub use primitives::{
    init_act_step, init_step_pnorm, lsq_act_quant, minmax_step, quantize_uniform, rectified_sigmoid,
    rectified_sigmoid_inverse, rounding_reg, soft_quant_weights, BetaSchedule, Bounds,
};
pub use recon::{quantize_model, reconstruct_block, BlockReport, ReconConfig};

use thiserror::Error;

use crate::nn::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit width {0} not supported")]
    Bits(u32),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("block index {0} out of range")]
    BlockIndex(usize),
    #[error("activation quantizer {0} used before initialization")]
    Uninitialized(String),
    #[error("hard weights requested before finalize")]
    NotFinalized,
    #[error("loss became non-finite in block {block} at step {step}")]
    Diverged { block: usize, step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
