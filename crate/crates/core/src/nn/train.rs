use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledImages;
use super::model::{ForwardOpts, ModelGraph, BN_MOMENTUM};
use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Adam, Graph, LrSchedule, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// One EMA update of running statistics from observed batch statistics.
pub fn ema_update<T: Scalar>(running: &mut [T], batch: &[T], momentum: f64) {
    let m = T::lit(momentum);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}

/// Supervised training with Adam and a cosine schedule. BN layers normalize
/// with batch statistics and their running statistics track an EMA
/// (momentum 0.1) of the batch mean and biased variance.
pub fn pretrain<T: Scalar>(
    model: &ModelGraph<T>,
    data: &LabeledImages<T>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph<T>, TrainLog), ModelError> {
    pretrain_observed(model, data, cfg, |_| {})
}

/// Batch statistics seen by one BN layer at one optimizer step.
#[derive(Debug, Clone)]
pub struct BatchStats<'a, T> {
    pub step: usize,
    pub layer: &'a str,
    pub mean: &'a [T],
    /// Biased variance.
    pub var: &'a [T],
}

/// [`pretrain`] reporting every observed batch statistic to `observer`
/// before it enters the running-stat EMA.
pub fn pretrain_observed<T: Scalar>(
    model: &ModelGraph<T>,
    data: &LabeledImages<T>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&BatchStats<'_, T>),
) -> Result<(ModelGraph<T>, TrainLog), ModelError> {
    if data.image_shape() != model.arch.input {
        return Err(ModelError::Input(format!(
            "dataset images {:?} do not match arch input {:?}",
            data.image_shape(),
            model.arch.input
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(ModelError::Dataset(format!("label {} >= {} classes", bad, model.num_classes())));
    }
    if cfg.batch_size < 2 {
        return Err(ModelError::Config("batch_size must be at least 2".into()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut sched = LrSchedule::cosine(cfg.lr, total.max(1));
    let mut opt = Adam::<T>::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            // a trailing singleton batch has no batch variance
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.subset(chunk);
            let loss = train_step(&mut model, &batch, &mut opt, &mut sched, step, &mut observer).map_err(|e| match e {
                ModelError::Tensor(TensorError::NonFinite(_)) => ModelError::Divergence { step },
                other => other,
            })?;
            log.step_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    model.params.values_mut().for_each(Tensor::zero_grad);
    Ok((model, log))
}

fn train_step<T: Scalar>(
    model: &mut ModelGraph<T>,
    batch: &LabeledImages<T>,
    opt: &mut Adam<T>,
    sched: &mut LrSchedule,
    step: usize,
    observer: &mut impl FnMut(&BatchStats<'_, T>),
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(&batch.images);
    let (logits, taps) = model.forward_with_taps(&mut g, &bound, x, &mut ForwardOpts::train())?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let loss_value = g.scalar_value(loss).as_f64();
    g.backward(loss)?;
    // running stats from the observed batch statistics
    for (name, tap) in model.bn_order.clone().iter().zip(&taps.bn) {
        let mean = g.value(tap.mean).to_vec();
        let eps = T::lit(super::model::BN_EPS);
        let var: Vec<T> = g.value(tap.std).iter().map(|&s| s * s - eps).collect();
        observer(&BatchStats {
            step,
            layer: name,
            mean: &mean,
            var: &var,
        });
        let st = model.bn_stats.get_mut(name).expect("bn registered");
        ema_update(&mut st.mean, &mean, BN_MOMENTUM);
        ema_update(&mut st.var, &var, BN_MOMENTUM);
    }
    model.collect_grads(&g, &bound);
    opt.set_lr(sched.lr());
    let mut params: Vec<&mut Tensor<T>> = model.params.values_mut().collect();
    opt.step(&mut params)?;
    sched.step(None);
    Ok(loss_value)
}
