use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use genie_core::distill::{distill_dataset, DistillConfig, DistillMode};
use genie_core::nn::checkpoint::atomic_write;
use genie_core::nn::{LabeledImages, ModelGraph};
use genie_core::quant::{quantize_model, QuantMode, ReconConfig};
use genie_core::tensor::Tensor;

use crate::commands::{model_accuracy, quantized_accuracy, recon_config, test_set, write_json, F};
use crate::config::{QuantizerVariant, RunConfig};
use crate::error::PipelineError;
use crate::report::{two_decimals, AblationReport, AblationRow, AblationSummary};

fn label(mode: DistillMode, q: QuantizerVariant) -> Option<String> {
    match (mode, q) {
        (DistillMode::Zeroq, QuantizerVariant::FrozenStep) => Some("M1".into()),
        (DistillMode::Genie, QuantizerVariant::GenieM) => Some("M7".into()),
        _ => None,
    }
}

/// Distills enough images for the largest requested count; smaller counts
/// use prefixes, which batch independence makes identical to distilling
/// them alone whenever they are whole batches.
fn calibration_pool(model: &ModelGraph<F>, cfg: &DistillConfig, max_images: usize, seed: u64) -> Result<Tensor<F>, PipelineError> {
    let b = cfg.batch_size;
    let n = max_images.div_ceil(b) * b;
    Ok(distill_dataset(model, n, cfg, seed)?.images)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

fn summarize(cfg: &RunConfig, rows: &[AblationRow]) -> AblationSummary {
    let max_n = *cfg.ablate.num_images.iter().max().expect("validated non-empty");
    let p0 = cfg.ablate.init_norms[0];
    let avg = |mode: DistillMode, q: QuantizerVariant, n: usize, p: f64| -> Option<f64> {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.data_mode == mode && r.quantizer == q && r.num_images == n && r.init_norm == p)
            .map(|r| r.accuracy_hard)
            .collect();
        (!accs.is_empty()).then(|| mean(&accs))
    };
    let mut spread = BTreeMap::new();
    for &q in &cfg.ablate.quantizers {
        let accs: Vec<f64> = cfg
            .ablate
            .init_norms
            .iter()
            .filter_map(|&p| avg(DistillMode::Genie, q, max_n, p))
            .collect();
        if !accs.is_empty() {
            let hi = accs.iter().copied().fold(f64::MIN, f64::max);
            let lo = accs.iter().copied().fold(f64::MAX, f64::min);
            spread.insert(q.name().to_string(), hi - lo);
        }
    }
    let mut counts = cfg.ablate.num_images.clone();
    counts.sort_unstable();
    counts.dedup();
    let trend: Vec<(f64, f64)> = counts
        .iter()
        .filter_map(|&n| avg(DistillMode::Genie, QuantizerVariant::GenieM, n, p0).map(|a| (n as f64, a)))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = trend.into_iter().unzip();
    AblationSummary {
        m1_accuracy: avg(DistillMode::Zeroq, QuantizerVariant::FrozenStep, max_n, p0),
        m7_accuracy: avg(DistillMode::Genie, QuantizerVariant::GenieM, max_n, p0),
        init_norm_spread: spread,
        num_images_trend: if xs.len() >= 2 { spearman(&xs, &ys) } else { None },
    }
}

/// Runs the full cross-product of data modes, quantizer variants, image
/// counts, init norms and seeds against an in-memory model.
pub fn run_ablation(model: &ModelGraph<F>, test: &LabeledImages<F>, cfg: &RunConfig) -> Result<AblationReport, PipelineError> {
    let start = Instant::now();
    let a = &cfg.ablate;
    let max_n = *a.num_images.iter().max().expect("validated non-empty");
    let mut rows = Vec::new();
    for seed in cfg.ablate_seeds() {
        for &mode in &a.data_modes {
            let dcfg = DistillConfig {
                mode,
                ..cfg.distill.clone()
            };
            let pool = calibration_pool(model, &dcfg, max_n, seed)?;
            for &n in &a.num_images {
                let calib = pool.slice_batch(0, n);
                for &q in &a.quantizers {
                    for &p in &a.init_norms {
                        let rcfg = ReconConfig {
                            seed,
                            init_norm: p,
                            learn_step: q == QuantizerVariant::GenieM,
                            ..recon_config(cfg)
                        };
                        let (soft, _) = quantize_model(model, &calib, &rcfg)?;
                        let hard = soft.finalize();
                        rows.push(AblationRow {
                            label: label(mode, q),
                            data_mode: mode,
                            quantizer: q,
                            num_images: n,
                            init_norm: p,
                            seed,
                            accuracy_soft: two_decimals(quantized_accuracy(&soft, test, QuantMode::Soft)?),
                            accuracy_hard: two_decimals(quantized_accuracy(&hard, test, QuantMode::Hard)?),
                            hv_binarization: soft.binarization(0.01),
                        });
                    }
                }
            }
        }
    }
    let summary = summarize(cfg, &rows);
    Ok(AblationReport {
        config: cfg.clone(),
        fp32_accuracy: two_decimals(model_accuracy(model, test)?),
        rows,
        summary,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("label,data_mode,quantizer,num_images,init_norm,seed,accuracy_soft,accuracy_hard,hV_binarization\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.2},{:.2},{:.4}",
            r.label.as_deref().unwrap_or(""),
            r.data_mode.name(),
            r.quantizer.name(),
            r.num_images,
            r.init_norm,
            r.seed,
            r.accuracy_soft,
            r.accuracy_hard,
            r.hv_binarization
        )
        .expect("writing to a string");
    }
    out
}

/// Ablation over `model.genz`; writes `ablation.json` and `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport, PipelineError> {
    let path = cfg.model_path();
    if !path.exists() {
        return Err(PipelineError::Io(format!("pretrained model not found at {}", path.display())));
    }
    let model = ModelGraph::<F>::load(&path)?;
    let report = run_ablation(&model, &test_set(cfg), cfg)?;
    write_json(&cfg.out_dir.join("ablation.json"), &report)?;
    atomic_write(&cfg.out_dir.join("ablation.csv"), ablation_csv(&report).as_bytes())?;
    Ok(report)
}
