//! Calibration-image synthesis from batch-norm statistics.

pub mod bns;
pub mod engine;
pub mod generator;
pub mod swing;

pub use bns::bns_loss;
pub use engine::{
    baseline_distill_direct, baseline_distill_generator_only, batch_seed, distill_batch, distill_batches,
    distill_dataset, measure_bns, worker_threads, BatchOutcome, BatchSummary, DistillConfig, DistillMode,
    DistilledDataset,
};
pub use generator::{Generator, GeneratorConfig, LATENT_DIM};
pub use swing::{swing_conv2d, swing_conv2d_at, SwingConfig};

use thiserror::Error;

use crate::nn::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("loss became non-finite at iteration {iter}")]
    Diverged { iter: usize },
    #[error("batch {index}: {source}")]
    Batch { index: usize, source: Box<DistillError> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
