use genie_core::distill::DistillError;
use genie_core::nn::{CheckpointError, ModelError};
use genie_core::quant::QuantError;
use genie_core::tensor::TensorError;
use thiserror::Error;

/// Failure of a pipeline command, grouped by process exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Numeric(_) => 3,
            PipelineError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Config(e.to_string())
    }
}

fn tensor(e: TensorError) -> PipelineError {
    match e {
        TensorError::NonFinite(_) => PipelineError::Numeric(e.to_string()),
        other => PipelineError::Config(other.to_string()),
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Divergence { .. } => PipelineError::Numeric(e.to_string()),
            ModelError::Tensor(t) => tensor(t),
            ModelError::Dataset(_) => PipelineError::Io(e.to_string()),
            other => PipelineError::Config(other.to_string()),
        }
    }
}

impl From<DistillError> for PipelineError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Diverged { .. } => PipelineError::Numeric(e.to_string()),
            DistillError::Batch { ref source, .. } if matches!(**source, DistillError::Diverged { .. }) => {
                PipelineError::Numeric(e.to_string())
            }
            DistillError::Tensor(t) => tensor(t),
            DistillError::Model(m) => m.into(),
            other => PipelineError::Config(other.to_string()),
        }
    }
}

impl From<QuantError> for PipelineError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Diverged { .. } | QuantError::NonFinite => PipelineError::Numeric(e.to_string()),
            QuantError::Tensor(t) => tensor(t),
            QuantError::Model(m) => m.into(),
            other => PipelineError::Config(other.to_string()),
        }
    }
}
