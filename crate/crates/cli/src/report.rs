use std::collections::BTreeMap;

use genie_core::distill::DistillMode;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Rounds to two decimals, the reporting precision of accuracies.
pub fn two_decimals(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMse {
    pub block: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Learned rounding lost to nearest rounding and was discarded.
    pub reverted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub batch: usize,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss at every distillation iteration.
    pub losses: Vec<f64>,
}

/// Outcome of `quantize`: accuracies, reconstruction errors, the BNS trace
/// of the calibration data and provenance of every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub fp32_accuracy: f64,
    pub quant_accuracy_soft: f64,
    pub quant_accuracy_hard: f64,
    pub blocks: Vec<BlockMse>,
    pub bns_trace: Vec<BatchTrace>,
    #[serde(rename = "hV_binarization")]
    pub hv_binarization: f64,
    /// Largest hardened-vs-soft logit difference on the calibration set.
    pub hard_soft_logit_diff: f64,
    /// Seconds per phase, including earlier phases found in the output dir.
    pub wall_clock_s: BTreeMap<String, f64>,
    /// SHA-256 of each artifact file.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub wall_clock_s: f64,
    pub model_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub mode: DistillMode,
    pub num_images: usize,
    pub batches: Vec<BatchTrace>,
    pub wall_clock_s: f64,
    pub model_sha256: String,
    pub dataset_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    /// `"model"` or `"quantized"`.
    pub kind: String,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `M1` for ZeroQ data with frozen steps, `M7` for the full method.
    pub label: Option<String>,
    pub data_mode: DistillMode,
    pub quantizer: crate::config::QuantizerVariant,
    pub num_images: usize,
    pub init_norm: f64,
    pub seed: u64,
    pub accuracy_soft: f64,
    pub accuracy_hard: f64,
    #[serde(rename = "hV_binarization")]
    pub hv_binarization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    /// Seed-averaged hardened accuracy of the ZeroQ + frozen-step runs at the
    /// largest image count and first norm.
    pub m1_accuracy: Option<f64>,
    /// Same for Genie data with the jointly learned quantizer.
    pub m7_accuracy: Option<f64>,
    /// Per quantizer: max minus min seed-averaged accuracy across init
    /// norms, on Genie data at the largest image count.
    pub init_norm_spread: BTreeMap<String, f64>,
    /// Spearman correlation of image count with seed-averaged accuracy for
    /// Genie data and the full quantizer (reported, not asserted).
    pub num_images_trend: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub fp32_accuracy: f64,
    pub rows: Vec<AblationRow>,
    pub summary: AblationSummary,
    pub wall_clock_s: f64,
}
