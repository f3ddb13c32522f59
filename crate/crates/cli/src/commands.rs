use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use genie_core::distill::{distill_dataset, DistilledDataset};
use genie_core::nn::checkpoint::{atomic_write, file_sha256};
use genie_core::nn::{accuracy, desk_split, pretrain, Checkpoint, LabeledImages, ModelError, ModelGraph, TrainConfig};
use genie_core::quant::{quantize_model, QuantMode, QuantizedModel, ReconConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::PipelineError;
use crate::report::{two_decimals, BatchTrace, BlockMse, DistillSummary, EvalSummary, PretrainSummary, Report};

/// Element type of every pipeline model.
pub type F = f32;

const EVAL_CHUNK: usize = 200;

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Io(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn hash(path: &Path) -> Result<String, PipelineError> {
    Ok(file_sha256(path)?)
}

fn need(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Io(format!("{} not found at {}", what, path.display())))
    }
}

/// Held-out split of the configured dataset.
pub fn test_set(cfg: &RunConfig) -> LabeledImages<F> {
    desk_split(cfg.data.train_size, cfg.data.test_size, cfg.data.seed).1
}

pub fn model_accuracy(model: &ModelGraph<F>, test: &LabeledImages<F>) -> Result<f64, PipelineError> {
    Ok(accuracy(|x| model.predict(x), &test.images, &test.labels, EVAL_CHUNK)?)
}

pub fn quantized_accuracy(qm: &QuantizedModel<F>, test: &LabeledImages<F>, mode: QuantMode) -> Result<f64, PipelineError> {
    let acc = accuracy(
        |x| qm.predict(x, mode).map_err(|e| ModelError::Input(e.to_string())),
        &test.images,
        &test.labels,
        EVAL_CHUNK,
    )?;
    Ok(acc)
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    }
}

pub(crate) fn recon_config(cfg: &RunConfig) -> ReconConfig {
    ReconConfig {
        seed: cfg.seed,
        ..cfg.quant.clone()
    }
}

/// Trains the configured architecture on the desk set and writes
/// `model.genz` and `pretrain.json`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    let start = Instant::now();
    let arch = cfg.arch_config()?;
    let model = ModelGraph::<F>::build(&arch)?;
    let (train, test) = desk_split::<F>(cfg.data.train_size, cfg.data.test_size, cfg.data.seed);
    let (trained, log) = pretrain(&model, &train, &train_config(cfg))?;
    let acc = two_decimals(model_accuracy(&trained, &test)?);
    let path = cfg.model_path();
    trained.save(&path, json!({ "test_accuracy": acc, "seed": cfg.seed }))?;
    let summary = PretrainSummary {
        test_accuracy: acc,
        epoch_losses: log.epoch_losses,
        wall_clock_s: start.elapsed().as_secs_f64(),
        model_sha256: hash(&path)?,
    };
    write_json(&cfg.out_dir.join("pretrain.json"), &summary)?;
    Ok(path)
}

fn batch_traces(ds: &DistilledDataset<F>) -> Vec<BatchTrace> {
    ds.batches
        .iter()
        .enumerate()
        .map(|(k, b)| BatchTrace {
            batch: k,
            seed: b.seed,
            initial_loss: b.initial_loss,
            final_loss: b.final_loss,
            losses: b.trace.clone(),
        })
        .collect()
}

/// `batch,iter,loss` rows of every batch trace.
pub fn trace_csv(ds: &DistilledDataset<F>) -> String {
    let mut out = String::from("batch,iter,loss\n");
    for (batch, iter, loss) in ds.trace_rows() {
        writeln!(out, "{},{},{:e}", batch, iter, loss).expect("writing to a string");
    }
    out
}

/// Distills the calibration set from `model.genz`; writes
/// `distilled.genz`, `bns_trace.csv` and `distill.json`.
pub fn cmd_distill(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    let start = Instant::now();
    let model_path = cfg.model_path();
    need(&model_path, "pretrained model")?;
    let model = ModelGraph::<F>::load(&model_path)?;
    let model_hash = hash(&model_path)?;
    let ds = distill_dataset(&model, cfg.num_images, &cfg.distill, cfg.seed)?;
    let path = cfg.dataset_path();
    ds.to_checkpoint(Some(model_hash.clone())).save(&path)?;
    atomic_write(&cfg.trace_path(), trace_csv(&ds).as_bytes())?;
    let summary = DistillSummary {
        mode: cfg.distill.mode,
        num_images: ds.len(),
        batches: batch_traces(&ds),
        wall_clock_s: start.elapsed().as_secs_f64(),
        model_sha256: model_hash,
        dataset_sha256: hash(&path)?,
    };
    write_json(&cfg.out_dir.join("distill.json"), &summary)?;
    Ok(path)
}

/// Quantizes `model.genz` with the distilled set, hardens the result and
/// writes `quantized.genz` plus `report.json`.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<Report, PipelineError> {
    let model_path = cfg.model_path();
    let data_path = cfg.dataset_path();
    need(&model_path, "pretrained model")?;
    need(&data_path, "distilled dataset")?;
    let model = ModelGraph::<F>::load(&model_path)?;
    let ds = DistilledDataset::<F>::from_checkpoint(&Checkpoint::load(&data_path)?)?;
    let mut hashes = BTreeMap::new();
    hashes.insert("model".to_string(), hash(&model_path)?);
    hashes.insert("dataset".to_string(), hash(&data_path)?);

    let start = Instant::now();
    let (soft, blocks) = quantize_model(&model, &ds.images, &recon_config(cfg))?;
    let hard = soft.finalize();
    let quantize_s = start.elapsed().as_secs_f64();
    let path = cfg.quantized_path();
    hard.save(&path, json!({ "model_sha256": hashes["model"], "dataset_sha256": hashes["dataset"] }))?;
    hashes.insert("quantized".to_string(), hash(&path)?);

    let start = Instant::now();
    let test = test_set(cfg);
    let fp32 = model_accuracy(&model, &test)?;
    let acc_soft = quantized_accuracy(&soft, &test, QuantMode::Soft)?;
    let acc_hard = quantized_accuracy(&hard, &test, QuantMode::Hard)?;
    let logits_soft = soft.predict(&ds.images, QuantMode::Soft)?;
    let logits_hard = hard.predict(&ds.images, QuantMode::Hard)?;
    let diff = logits_soft
        .data()
        .iter()
        .zip(logits_hard.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let eval_s = start.elapsed().as_secs_f64();

    let mut wall = BTreeMap::new();
    if let Some(p) = read_json::<PretrainSummary>(&cfg.out_dir.join("pretrain.json")) {
        wall.insert("pretrain".to_string(), p.wall_clock_s);
    }
    if let Some(d) = read_json::<DistillSummary>(&cfg.out_dir.join("distill.json")) {
        wall.insert("distill".to_string(), d.wall_clock_s);
    }
    wall.insert("quantize".to_string(), quantize_s);
    wall.insert("eval".to_string(), eval_s);

    let report = Report {
        config: cfg.clone(),
        fp32_accuracy: two_decimals(fp32),
        quant_accuracy_soft: two_decimals(acc_soft),
        quant_accuracy_hard: two_decimals(acc_hard),
        blocks: blocks
            .iter()
            .map(|b| BlockMse {
                block: b.block,
                initial_mse: b.initial_mse,
                final_mse: b.final_mse,
                reverted: b.reverted,
            })
            .collect(),
        bns_trace: batch_traces(&ds),
        hv_binarization: soft.binarization(0.01),
        hard_soft_logit_diff: diff,
        wall_clock_s: wall,
        hashes,
    };
    write_json(&cfg.out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Top-1 accuracy of a model or quantized checkpoint on the held-out set.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary, PipelineError> {
    let path = match &cfg.eval.checkpoint {
        Some(p) => p.clone(),
        None if cfg.quantized_path().exists() => cfg.quantized_path(),
        None => cfg.model_path(),
    };
    need(&path, "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    let kind = ck.metadata.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    let test = test_set(cfg);
    let acc = match kind.as_str() {
        "model" => model_accuracy(&ModelGraph::<F>::from_checkpoint(&ck)?, &test)?,
        "quantized" => {
            let qm = QuantizedModel::<F>::from_checkpoint(&ck)?;
            let mode = if qm.finalized { QuantMode::Hard } else { QuantMode::Soft };
            quantized_accuracy(&qm, &test, mode)?
        }
        other => {
            return Err(PipelineError::Config(format!(
                "{} holds a {:?} checkpoint, not a model",
                path.display(),
                other
            )))
        }
    };
    let summary = EvalSummary {
        checkpoint: path.display().to_string(),
        kind,
        accuracy: two_decimals(acc),
        samples: test.len(),
    };
    write_json(&cfg.out_dir.join("eval.json"), &summary)?;
    Ok(summary)
}
