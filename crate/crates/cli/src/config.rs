use std::path::{Path, PathBuf};

use genie_core::distill::{DistillConfig, DistillMode};
use genie_core::nn::{ArchConfig, TrainConfig};
use genie_core::quant::ReconConfig;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

/// Everything a pipeline run depends on. The top-level `seed` replaces the
/// `seed` fields of the pretrain and quant sections; `data.seed` names the
/// dataset and is never overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in architecture name or path to an arch JSON file.
    pub arch: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    /// Number of distilled calibration images.
    pub num_images: usize,
    pub distill: DistillConfig,
    pub quant: ReconConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

/// The synthetic desk dataset used for pretraining and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Only `"desk"` is built in.
    pub id: String,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            id: "desk".into(),
            train_size: 4000,
            test_size: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoint to evaluate; defaults to the quantized model in `out_dir`
    /// if present, else the pretrained one.
    pub checkpoint: Option<PathBuf>,
}

/// Quantizer variants compared by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerVariant {
    /// Steps, rounding and activation steps learned jointly.
    GenieM,
    /// Weight steps frozen at their initial values.
    FrozenStep,
}

impl QuantizerVariant {
    pub fn name(self) -> &'static str {
        match self {
            QuantizerVariant::GenieM => "genie_m",
            QuantizerVariant::FrozenStep => "frozen_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub data_modes: Vec<DistillMode>,
    pub quantizers: Vec<QuantizerVariant>,
    pub num_images: Vec<usize>,
    pub init_norms: Vec<f64>,
    /// Seeds of the repeated runs; empty means just the run seed.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            data_modes: vec![DistillMode::Zeroq, DistillMode::Genie],
            quantizers: vec![QuantizerVariant::FrozenStep, QuantizerVariant::GenieM],
            num_images: vec![32, 64, 128, 256],
            init_norms: vec![2.0],
            seeds: vec![],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "resnet-tiny".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            num_images: 256,
            distill: DistillConfig {
                batch_size: 64,
                iters: 200,
                generator_channels: 16,
                ..DistillConfig::default()
            },
            quant: ReconConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(src: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(src).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_json(&src)
    }

    /// Applies command-line overrides and re-validates.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, PipelineError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.arch_config()?;
        if self.data.id != "desk" {
            return bad(format!("unknown dataset id {:?}", self.data.id));
        }
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.pretrain.batch_size < 2 || self.pretrain.epochs == 0 || !(self.pretrain.lr >= 0.0) {
            return bad(format!("invalid pretrain section {:?}", self.pretrain));
        }
        let b = self.distill.batch_size;
        if b == 0 || self.num_images == 0 || self.num_images % b != 0 {
            return bad(format!(
                "num_images {} must be a positive multiple of the distill batch size {}",
                self.num_images, b
            ));
        }
        if self.distill.generator_channels == 0 {
            return bad("generator_channels must be positive".into());
        }
        self.quant.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.quant.steps == 0 {
            return bad("quant.steps must be positive".into());
        }
        let a = &self.ablate;
        if a.data_modes.is_empty() || a.quantizers.is_empty() || a.num_images.is_empty() || a.init_norms.is_empty() {
            return bad("every ablation axis needs at least one value".into());
        }
        if a.num_images.contains(&0) || a.init_norms.iter().any(|p| !(*p > 0.0)) {
            return bad("ablation image counts and norms must be positive".into());
        }
        Ok(())
    }

    pub fn arch_config(&self) -> Result<ArchConfig, PipelineError> {
        let arch = if genie_core::nn::BUILTIN_ARCHS.contains(&self.arch.as_str()) {
            ArchConfig::builtin(&self.arch)
        } else {
            let src = std::fs::read_to_string(&self.arch)
                .map_err(|e| PipelineError::Config(format!("arch {:?}: {}", self.arch, e)))?;
            ArchConfig::from_json(&src)
        };
        arch.map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.genz")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("distilled.genz")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.out_dir.join("bns_trace.csv")
    }

    pub fn quantized_path(&self) -> PathBuf {
        self.out_dir.join("quantized.genz")
    }

    pub fn ablate_seeds(&self) -> Vec<u64> {
        if self.ablate.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablate.seeds.clone()
        }
    }
}
