//! Small batch-normalized CNNs: declarative architectures, forward passes
//! with statistic taps, pretraining, datasets and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod train;

pub use arch::{ArchConfig, LayerSpec, BUILTIN_ARCHS};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use dataset::{desk_dataset, desk_split, LabeledImages};
pub use model::{accuracy, BnTap, BnUse, Bound, ForwardOpts, Layer, ModelGraph, RunningStats, TapRecord};
pub use train::{pretrain, pretrain_observed, TrainConfig, TrainLog};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("arch config: {0}")]
    Config(String),
    #[error("unknown architecture {0}")]
    UnknownArch(String),
    #[error("input: {0}")]
    Input(String),
    #[error("statistic taps requested on a model without batch norm")]
    NoBatchNorm,
    #[error("block index {0} out of range")]
    BlockIndex(usize),
    #[error("swing convolution: {0}")]
    Swing(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
