//! Pipeline orchestration behind the `genie` command: pretraining,
//! distillation, quantization, evaluation and ablation runs driven by one
//! JSON config, with atomically written artifacts and JSON reports.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use ablate::{cmd_ablate, run_ablation};
pub use commands::{cmd_distill, cmd_eval, cmd_pretrain, cmd_quantize};
pub use config::{AblateConfig, DataConfig, EvalConfig, QuantizerVariant, RunConfig};
pub use error::PipelineError;
pub use report::{AblationReport, AblationRow, EvalSummary, Report};
