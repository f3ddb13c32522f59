use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bns::bns_loss;
use super::generator::{Generator, GeneratorConfig};
use super::swing::SwingConfig;
use super::DistillError;
use crate::nn::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::model::{BnUse, ForwardOpts, ModelGraph};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Adam, Graph, LrSchedule, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Generator and per-image latents trained jointly.
    Genie,
    /// Pixels optimized directly, no generator, no swing.
    Zeroq,
    /// Generator only, latents redrawn from a Gaussian every step.
    Gba,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Genie => "genie",
            DistillMode::Zeroq => "zeroq",
            DistillMode::Gba => "gba",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub batch_size: usize,
    pub iters: usize,
    pub swing: bool,
    pub generator_channels: usize,
    pub lr_generator: f64,
    pub generator_gamma: f64,
    pub generator_every: u64,
    pub lr_latent: f64,
    /// Learning rate for direct pixel optimization.
    pub lr_pixels: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u64,
    pub plateau_min_lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Genie,
            batch_size: 128,
            iters: 500,
            swing: true,
            generator_channels: 64,
            lr_generator: 0.01,
            generator_gamma: 0.95,
            generator_every: 100,
            lr_latent: 0.1,
            lr_pixels: 0.1,
            plateau_factor: 0.5,
            plateau_patience: 50,
            plateau_min_lr: 1e-4,
        }
    }
}

impl DistillConfig {
    fn plateau(&self, lr: f64) -> LrSchedule {
        LrSchedule::reduce_on_plateau(lr, self.plateau_factor, self.plateau_patience, self.plateau_min_lr)
    }
}

/// Result of distilling one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome<T> {
    pub images: Tensor<T>,
    /// Training loss of every iteration (with swing when enabled).
    pub trace: Vec<f64>,
    /// BNS loss of the starting images under a plain forward.
    pub initial_loss: f64,
    /// BNS loss of the returned images under a plain forward.
    pub final_loss: f64,
}

/// BNS loss of `x` against the model's running statistics; BN layers
/// normalize with batch statistics.
fn model_bns<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelGraph<T>,
    x: Var,
    swing: Option<&mut SwingConfig>,
) -> Result<Var, DistillError> {
    let bound = model.bind(g, false);
    let mut opts = ForwardOpts {
        bn: BnUse::Batch,
        tap_bn: true,
        tap_blocks: false,
        swing,
    };
    let (_, taps) = model.forward_with_taps(g, &bound, x, &mut opts)?;
    bns_loss(g, &taps.bn, &model.running_stats())
}

/// BNS loss of concrete images under a plain (non-swing) forward.
pub fn measure_bns<T: Scalar>(model: &ModelGraph<T>, images: &Tensor<T>) -> Result<f64, DistillError> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let l = model_bns(&mut g, model, x, None)?;
    Ok(g.scalar_value(l).as_f64())
}

fn diverged(iter: usize) -> impl Fn(DistillError) -> DistillError {
    move |e| match e {
        DistillError::Tensor(TensorError::NonFinite(_))
        | DistillError::Model(crate::nn::ModelError::Tensor(TensorError::NonFinite(_))) => {
            DistillError::Diverged { iter }
        }
        other => other,
    }
}

fn swing_for(cfg: &DistillConfig, seed: u64) -> SwingConfig {
    if cfg.swing {
        SwingConfig::from_rng(rng::stream(seed, rng::SWING))
    } else {
        SwingConfig::disabled()
    }
}

fn check_model<T: Scalar>(model: &ModelGraph<T>, cfg: &DistillConfig) -> Result<(), DistillError> {
    if model.num_bn() == 0 {
        return Err(DistillError::Model(crate::nn::ModelError::NoBatchNorm));
    }
    if cfg.batch_size < 2 {
        return Err(DistillError::Invalid("batch size must be at least 2".into()));
    }
    Ok(())
}

/// Distills one batch with the configured mode; `seed` fixes every random
/// stream of the batch.
pub fn distill_batch<T: Scalar>(
    model: &ModelGraph<T>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<BatchOutcome<T>, DistillError> {
    check_model(model, cfg)?;
    match cfg.mode {
        DistillMode::Genie => distill_genie(model, cfg, seed),
        DistillMode::Zeroq => baseline_distill_direct(model, cfg, seed),
        DistillMode::Gba => baseline_distill_generator_only(model, cfg, seed),
    }
}

fn new_generator<T: Scalar>(model: &ModelGraph<T>, cfg: &DistillConfig, seed: u64) -> Result<Generator<T>, DistillError> {
    let gcfg = GeneratorConfig::for_input(model.arch.input, cfg.generator_channels)?;
    Ok(Generator::new(gcfg, &mut rng::stream(seed, rng::GENERATOR_INIT)))
}

fn distill_genie<T: Scalar>(
    model: &ModelGraph<T>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<BatchOutcome<T>, DistillError> {
    let mut gen = new_generator(model, cfg, seed)?;
    let latent = gen.config.latent_dim;
    let mut z = Tensor::randn(&[cfg.batch_size, latent], 1.0, &mut rng::stream(seed, rng::LATENT_INIT));
    let mut swing = swing_for(cfg, seed);
    let mut opt_gen = Adam::new(cfg.lr_generator);
    let mut sched_gen = LrSchedule::exponential(cfg.lr_generator, cfg.generator_gamma, cfg.generator_every);
    let mut opt_z = Adam::new(cfg.lr_latent);
    let mut sched_z = cfg.plateau(cfg.lr_latent);
    let initial_loss = measure_bns(model, &gen.generate(&z)?)?;
    let mut trace = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let step = (|| {
            let mut g = Graph::new();
            let gp = gen.bind(&mut g, true);
            let zv = g.param(&z);
            let x = gen.forward(&mut g, &gp, zv)?;
            let loss = model_bns(&mut g, model, x, Some(&mut swing))?;
            g.backward(loss)?;
            gen.collect_grads(&g, &gp);
            z.set_grad(g.grad(zv).expect("latents are trainable").to_vec())?;
            Ok::<f64, DistillError>(g.scalar_value(loss).as_f64())
        })()
        .map_err(diverged(iter))?;
        trace.push(step);
        opt_gen.set_lr(sched_gen.lr());
        opt_gen.step(&mut gen.params.values_mut().collect::<Vec<_>>())?;
        opt_z.set_lr(sched_z.lr());
        opt_z.step(&mut [&mut z])?;
        sched_gen.step(None);
        sched_z.step(Some(step));
    }
    let images = gen.generate(&z)?;
    let final_loss = measure_bns(model, &images)?;
    Ok(BatchOutcome {
        images,
        trace,
        initial_loss,
        final_loss,
    })
}

/// Optimizes Gaussian-initialized pixels directly against the BNS loss.
pub fn baseline_distill_direct<T: Scalar>(
    model: &ModelGraph<T>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<BatchOutcome<T>, DistillError> {
    check_model(model, cfg)?;
    let [c, h, w] = model.arch.input;
    let mut x = Tensor::randn(&[cfg.batch_size, c, h, w], 1.0, &mut rng::stream(seed, rng::LATENT_INIT));
    let mut opt = Adam::new(cfg.lr_pixels);
    let mut sched = cfg.plateau(cfg.lr_pixels);
    let initial_loss = measure_bns(model, &x)?;
    let mut trace = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let step = (|| {
            let mut g = Graph::new();
            let xv = g.param(&x);
            let loss = model_bns(&mut g, model, xv, None)?;
            g.backward(loss)?;
            x.set_grad(g.grad(xv).expect("pixels are trainable").to_vec())?;
            Ok::<f64, DistillError>(g.scalar_value(loss).as_f64())
        })()
        .map_err(diverged(iter))?;
        trace.push(step);
        opt.set_lr(sched.lr());
        opt.step(&mut [&mut x])?;
        sched.step(Some(step));
    }
    x.zero_grad();
    let final_loss = measure_bns(model, &x)?;
    Ok(BatchOutcome {
        images: x.with_requires_grad(false),
        trace,
        initial_loss,
        final_loss,
    })
}

/// Trains only the generator; its input is a fresh Gaussian draw every step.
pub fn baseline_distill_generator_only<T: Scalar>(
    model: &ModelGraph<T>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<BatchOutcome<T>, DistillError> {
    check_model(model, cfg)?;
    let mut gen = new_generator(model, cfg, seed)?;
    let shape = [cfg.batch_size, gen.config.latent_dim];
    let mut noise = rng::stream(seed, rng::LATENT_RESAMPLE);
    let mut swing = swing_for(cfg, seed);
    let mut opt = Adam::new(cfg.lr_generator);
    let mut sched = LrSchedule::exponential(cfg.lr_generator, cfg.generator_gamma, cfg.generator_every);
    let z0: Tensor<T> = Tensor::randn(&shape, 1.0, &mut rng::stream(seed, rng::LATENT_INIT));
    let initial_loss = measure_bns(model, &gen.generate(&z0)?)?;
    let mut trace = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let z: Tensor<T> = if iter == 0 { z0.clone() } else { Tensor::randn(&shape, 1.0, &mut noise) };
        let step = (|| {
            let mut g = Graph::new();
            let gp = gen.bind(&mut g, true);
            let zv = g.constant(&z);
            let x = gen.forward(&mut g, &gp, zv)?;
            let loss = model_bns(&mut g, model, x, Some(&mut swing))?;
            g.backward(loss)?;
            gen.collect_grads(&g, &gp);
            debug_assert!(g.grad(zv).is_none());
            Ok::<f64, DistillError>(g.scalar_value(loss).as_f64())
        })()
        .map_err(diverged(iter))?;
        trace.push(step);
        opt.set_lr(sched.lr());
        opt.step(&mut gen.params.values_mut().collect::<Vec<_>>())?;
        sched.step(None);
    }
    let z: Tensor<T> = if cfg.iters == 0 { z0 } else { Tensor::randn(&shape, 1.0, &mut noise) };
    let images = gen.generate(&z)?;
    let final_loss = measure_bns(model, &images)?;
    Ok(BatchOutcome {
        images,
        trace,
        initial_loss,
        final_loss,
    })
}

/// Worker count for batch-level parallelism: `GENIE_THREADS` when set to a
/// positive integer, otherwise rayon's default.
pub fn worker_threads() -> usize {
    std::env::var("GENIE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledDataset<T> {
    pub images: Tensor<T>,
    pub config: DistillConfig,
    pub base_seed: u64,
    pub batches: Vec<BatchSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub seed: u64,
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Seed of batch `k`.
pub fn batch_seed(base_seed: u64, k: usize) -> u64 {
    base_seed ^ k as u64
}

/// Distills `num_images / batch_size` independent batches (each with a
/// fresh generator) and concatenates them in batch order. Batches run in
/// parallel on up to [`worker_threads`] threads; the result does not depend
/// on the thread count.
pub fn distill_dataset<T: Scalar>(
    model: &ModelGraph<T>,
    num_images: usize,
    cfg: &DistillConfig,
    base_seed: u64,
) -> Result<DistilledDataset<T>, DistillError> {
    if cfg.batch_size == 0 || num_images == 0 || num_images % cfg.batch_size != 0 {
        return Err(DistillError::Invalid(format!(
            "num_images {} must be a positive multiple of batch size {}",
            num_images, cfg.batch_size
        )));
    }
    let indices: Vec<usize> = (0..num_images / cfg.batch_size).collect();
    distill_batches(model, &indices, cfg, base_seed)
}

/// Distills only the listed batch indices of a dataset.
pub fn distill_batches<T: Scalar>(
    model: &ModelGraph<T>,
    indices: &[usize],
    cfg: &DistillConfig,
    base_seed: u64,
) -> Result<DistilledDataset<T>, DistillError> {
    let run = |&k: &usize| {
        let seed = batch_seed(base_seed, k);
        distill_batch(model, cfg, seed)
            .map(|o| (seed, o))
            .map_err(|e| DistillError::Batch {
                index: k,
                source: Box::new(e),
            })
    };
    let threads = worker_threads().min(indices.len()).max(1);
    let results: Vec<_> = if threads == 1 {
        indices.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| DistillError::Invalid(e.to_string()))?;
        pool.install(|| indices.par_iter().map(run).collect())
    };
    let mut parts = Vec::with_capacity(results.len());
    let mut batches = Vec::with_capacity(results.len());
    for r in results {
        let (seed, o) = r?;
        parts.push(o.images);
        batches.push(BatchSummary {
            seed,
            trace: o.trace,
            initial_loss: o.initial_loss,
            final_loss: o.final_loss,
        });
    }
    Ok(DistilledDataset {
        images: Tensor::concat_batch(&parts)?,
        config: cfg.clone(),
        base_seed,
        batches,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    kind: String,
    config: DistillConfig,
    base_seed: u64,
    batches: Vec<BatchSummary>,
    #[serde(default)]
    model_hash: Option<String>,
}

impl<T: Scalar> DistilledDataset<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trace rows `(batch, iter, loss)`.
    pub fn trace_rows(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.batches
            .iter()
            .enumerate()
            .flat_map(|(b, s)| s.trace.iter().enumerate().map(move |(i, &l)| (b, i, l)))
    }

    pub fn to_checkpoint(&self, model_hash: Option<String>) -> Checkpoint {
        let meta = DatasetMeta {
            kind: "distilled".into(),
            config: self.config.clone(),
            base_seed: self.base_seed,
            batches: self.batches.clone(),
            model_hash,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("serializable"));
        ck.insert("images", &self.images);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let meta: DatasetMeta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if meta.kind != "distilled" {
            return Err(CheckpointError::Metadata(format!(
                "expected a distilled dataset, found {}",
                meta.kind
            )));
        }
        Ok(Self {
            images: ck.tensor("images")?,
            config: meta.config,
            base_seed: meta.base_seed,
            batches: meta.batches,
        })
    }
}
