use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::model::{ActQuant, QForward, QuantMode, QuantPolicy, QuantizedModel, Trainable, WeightQuant};
use super::primitives::{rectified_sigmoid, rounding_reg, BetaSchedule, TINY_STEP};
use super::QuantError;
use crate::nn::model::{ForwardOpts, ModelGraph, TapRecord};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Adam, Graph, LrSchedule, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub lambda: f64,
    pub beta: BetaSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_step: f64,
    pub lr_v: f64,
    pub lr_act: f64,
    pub qdrop_prob: f64,
    pub policy: QuantPolicy,
    /// Norm order of the weight step-size search.
    pub init_norm: f64,
    /// Train weight step sizes jointly with the rounding variables. When
    /// off, steps stay at their initial values.
    pub learn_step: bool,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            bits_w: 4,
            bits_a: 4,
            lambda: 1.0,
            beta: BetaSchedule::default(),
            steps: 2000,
            batch_size: 32,
            lr_step: 1e-4,
            lr_v: 1e-2,
            lr_act: 4e-5,
            qdrop_prob: 0.5,
            policy: QuantPolicy::FirstLast8Bit,
            init_norm: 2.0,
            learn_step: true,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        for bits in [self.bits_w, self.bits_a] {
            if !(2..=8).contains(&bits) {
                return Err(QuantError::Bits(bits));
            }
        }
        self.beta.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(QuantError::Invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.qdrop_prob) {
            return Err(QuantError::Invalid(format!("qdrop_prob {} outside [0, 1]", self.qdrop_prob)));
        }
        if self.batch_size == 0 {
            return Err(QuantError::Invalid("batch_size must be positive".into()));
        }
        if !(self.init_norm > 0.0) {
            return Err(QuantError::Invalid(format!("init_norm must be positive, got {}", self.init_norm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// Per-element MSE against the full-precision block output over the
    /// whole calibration set, with nearest rounding at the initial steps.
    pub initial_mse: f64,
    /// Same with the learned rounding hardened.
    pub final_mse: f64,
    /// The learned state did not beat nearest rounding and was discarded.
    #[serde(default)]
    pub reverted: bool,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

/// Evaluation chunk for calibration-set passes.
const CHUNK: usize = 64;

/// Full-precision output of blocks `0..=block` for `images`.
pub fn teacher_block_output<T: Scalar>(
    teacher: &ModelGraph<T>,
    images: &Tensor<T>,
    block: usize,
) -> Result<Tensor<T>, QuantError> {
    if block >= teacher.blocks.len() {
        return Err(QuantError::BlockIndex(block));
    }
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut g = Graph::new();
        let bound = teacher.bind(&mut g, false);
        let mut h = g.constant(&images.slice_batch(start, end));
        let mut taps = TapRecord::default();
        for b in 0..=block {
            h = teacher.forward_block(&mut g, &bound, b, h, &mut ForwardOpts::eval(), &mut taps)?;
        }
        parts.push(g.tensor(h));
        start = end;
    }
    Ok(Tensor::concat_batch(&parts)?)
}

/// Student input (quantized predecessors, soft weights, no QDrop) and
/// full-precision target for reconstructing `block`.
pub fn recon_pair<T: Scalar>(
    teacher: &ModelGraph<T>,
    student: &QuantizedModel<T>,
    block: usize,
    calib: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), QuantError> {
    let mode = if student.finalized { QuantMode::Hard } else { QuantMode::Soft };
    let input = student.prefix(calib, block, mode, CHUNK)?;
    let target = teacher_block_output(teacher, calib, block)?;
    Ok((input, target))
}

/// Samples times spatial positions of an `[N, C, ...]` output.
fn positions(shape: &[usize]) -> usize {
    shape[0] * shape[2..].iter().product::<usize>()
}

/// Quantizer state of one block before training.
struct Snapshot<T> {
    weights: Vec<(String, WeightQuant<T>)>,
    acts: Vec<(String, ActQuant<T>)>,
}

impl<T: Scalar> Snapshot<T> {
    fn take(student: &QuantizedModel<T>, wn: &[String], an: &[String]) -> Self {
        Self {
            weights: wn.iter().map(|n| (n.clone(), student.weights[n].clone())).collect(),
            acts: an.iter().map(|n| (n.clone(), student.acts[n].clone())).collect(),
        }
    }

    /// Puts the initial steps back and saturates `V` at the nearest-rounding
    /// decision, so soft and hard weights agree.
    fn restore_nearest(self, student: &mut QuantizedModel<T>) {
        for (name, mut q) in self.weights {
            for v in q.v.data_mut() {
                let up = rectified_sigmoid(v.as_f64()) >= 0.5;
                *v = T::lit(if up { SATURATED_LOGIT } else { -SATURATED_LOGIT });
            }
            student.weights.insert(name, q);
        }
        for (name, a) in self.acts {
            student.acts.insert(name, a);
        }
    }
}

/// Rounding logit far enough out that the rectified sigmoid clamps to 0 or 1.
const SATURATED_LOGIT: f64 = 8.0;

/// Per-element MSE of the block with its weights hardened as they stand
/// (nearest rounding before any training, the learned rounding after).
fn block_mse<T: Scalar>(
    student: &QuantizedModel<T>,
    block: usize,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<f64, QuantError> {
    let hardened = student.finalize();
    let (wn, an) = student.block_quantizers(block)?;
    let n = input.shape()[0];
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut g = Graph::new();
        let bound = hardened.bind(&mut g, Some((&wn, &an)), QuantMode::Hard, Trainable::default())?;
        let x = g.constant(&input.slice_batch(start, end));
        let y = hardened.forward_block(&mut g, &bound, block, x, &mut QForward::plain(true))?;
        let t = target.slice_batch(start, end);
        total += g
            .value(y)
            .iter()
            .zip(t.data())
            .map(|(a, b)| {
                let d = (*a - *b).as_f64();
                d * d
            })
            .sum::<f64>();
        start = end;
    }
    Ok(total / target.numel() as f64)
}

/// Reconstructs one block: Adam on the weight steps (cosine to zero), the
/// rounding logits, and the activation steps (cosine to zero), minimizing
/// the squared output error (summed over channels, averaged over samples and
/// spatial positions) plus `lambda` times the annealed rounding regularizer. QDrop applies to
/// the block's own activation quantizers. Activation steps still unset are
/// initialized from the first batch. If the hardened result is no better
/// than nearest rounding at the initial steps, the block falls back to that.
pub fn reconstruct_block<T: Scalar>(
    teacher: &ModelGraph<T>,
    student: &mut QuantizedModel<T>,
    block: usize,
    calib: &Tensor<T>,
    cfg: &ReconConfig,
) -> Result<BlockReport, QuantError> {
    cfg.validate()?;
    if block >= student.num_blocks() {
        return Err(QuantError::BlockIndex(block));
    }
    let n = calib.shape()[0];
    if n == 0 {
        return Err(QuantError::Invalid("empty calibration set".into()));
    }
    let (input, target) = recon_pair(teacher, student, block, calib)?;
    let (wn, an) = student.block_quantizers(block)?;
    let batch = cfg.batch_size.min(n);
    let block_seed = cfg.seed ^ ((block as u64) << 32);
    let mut shuffle = rng::stream(block_seed, rng::CALIB_SHUFFLE);
    let mut qdrop = rng::stream(block_seed, rng::QDROP);
    let batches: Vec<Vec<usize>> = (0..cfg.steps.max(1))
        .map(|_| {
            let mut idx = sample(&mut shuffle, n, batch).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();

    // activation steps from the first batch
    let mut init = BTreeMap::new();
    {
        let mut g = Graph::new();
        let bound = student.bind(&mut g, Some((&wn, &an)), QuantMode::Soft, Trainable::default())?;
        let x = g.constant(&input.gather_batch(&batches[0]));
        let mut ctx = QForward {
            act_init: Some(&mut init),
            ..QForward::plain(true)
        };
        student.forward_block(&mut g, &bound, block, x, &mut ctx)?;
    }
    for (name, step) in init {
        let a = student.acts.get_mut(&name).expect("quantizer of this block");
        a.step = Some(T::lit(step));
        a.fallback = step == TINY_STEP;
    }

    let initial_mse = block_mse(student, block, &input, &target)?;
    let snapshot = Snapshot::take(student, &wn, &an);
    let scope: BTreeSet<String> = an.iter().cloned().collect();
    let trainable = Trainable {
        step: cfg.learn_step,
        v: true,
        act: true,
    };
    let total = cfg.steps as u64;
    let mut sched_step = LrSchedule::cosine(cfg.lr_step, total.max(1));
    let mut sched_act = LrSchedule::cosine(cfg.lr_act, total.max(1));
    let mut opt_step = Adam::new(cfg.lr_step);
    let mut opt_v = Adam::new(cfg.lr_v);
    let mut opt_act = Adam::new(cfg.lr_act);
    let mut losses = Vec::with_capacity(cfg.steps);
    for (step, idx) in batches.iter().enumerate().take(cfg.steps) {
        let mut g = Graph::new();
        let bound = student.bind(&mut g, Some((&wn, &an)), QuantMode::Soft, trainable)?;
        let x = g.constant(&input.gather_batch(idx));
        let t = g.constant(&target.gather_batch(idx));
        let mut ctx = QForward {
            quant_acts: true,
            qdrop_scope: Some(&scope),
            qdrop_prob: cfg.qdrop_prob,
            rng: Some(&mut qdrop),
            act_init: None,
        };
        let value = (|| {
            let y = student.forward_block(&mut g, &bound, block, x, &mut ctx)?;
            let d = g.sub(y, t)?;
            let sq = g.square(d)?;
            let sum = g.sum(sq)?;
            let denom = positions(g.shape(t)) as f64;
            let mut loss = g.mul_scalar(sum, T::lit(1.0 / denom))?;
            let (beta, active) = cfg.beta.at(step, cfg.steps);
            if active && cfg.lambda > 0.0 {
                for name in &wn {
                    let v = bound.weights[name].v.expect("soft mode binds V");
                    let r = rounding_reg(&mut g, v, beta)?;
                    let r = g.mul_scalar(r, T::lit(cfg.lambda))?;
                    loss = g.add(loss, r)?;
                }
            }
            g.backward(loss)?;
            Ok::<f64, QuantError>(g.scalar_value(loss).as_f64())
        })()
        .map_err(|e| match e {
            QuantError::Tensor(TensorError::NonFinite(_)) => QuantError::Diverged { block, step },
            other => other,
        })?;
        losses.push(value);

        let grad = |v: Option<Var>| v.and_then(|v| g.grad(v)).map(|s| s.to_vec());
        let mut steps_p: Vec<&mut Tensor<T>> = Vec::new();
        let mut vs_p: Vec<&mut Tensor<T>> = Vec::new();
        for (name, q) in student.weights.iter_mut() {
            let Some(wv) = bound.weights.get(name) else { continue };
            if cfg.learn_step {
                q.step.set_grad(grad(wv.step).unwrap_or_else(|| vec![T::zero(); q.step.numel()]))?;
                steps_p.push(&mut q.step);
            }
            q.v.set_grad(grad(wv.v).unwrap_or_else(|| vec![T::zero(); q.v.numel()]))?;
            vs_p.push(&mut q.v);
        }
        opt_step.set_lr(sched_step.lr());
        opt_step.step(&mut steps_p)?;
        opt_v.step(&mut vs_p)?;
        let mut act_tensors: Vec<(String, Tensor<T>)> = Vec::new();
        for (name, &var) in &bound.acts {
            let s = student.acts[name].step.expect("bound steps are initialized");
            let mut t = Tensor::scalar(s);
            t.set_grad(vec![g.grad(var).map_or(T::zero(), |d| d[0])])?;
            act_tensors.push((name.clone(), t));
        }
        opt_act.set_lr(sched_act.lr());
        opt_act.step(&mut act_tensors.iter_mut().map(|(_, t)| t).collect::<Vec<_>>())?;
        for (name, t) in act_tensors {
            student.acts.get_mut(&name).expect("bound").step = Some(t.data()[0]);
        }
        student.clamp_steps();
        sched_step.step(None);
        sched_act.step(None);
    }
    for q in student.weights.values_mut() {
        q.step.zero_grad();
        q.v.zero_grad();
    }
    let mut final_mse = block_mse(student, block, &input, &target)?;
    let reverted = cfg.steps > 0 && !(final_mse < initial_mse);
    if reverted {
        snapshot.restore_nearest(student);
        final_mse = block_mse(student, block, &input, &target)?;
    }
    Ok(BlockReport {
        block,
        initial_mse,
        final_mse,
        losses,
        reverted,
    })
}

/// Folds, initializes and reconstructs every block in order. The returned
/// model still uses soft rounding; see [`QuantizedModel::finalize`].
pub fn quantize_model<T: Scalar>(
    teacher: &ModelGraph<T>,
    calib: &Tensor<T>,
    cfg: &ReconConfig,
) -> Result<(QuantizedModel<T>, Vec<BlockReport>), QuantError> {
    cfg.validate()?;
    let mut qm = QuantizedModel::prepare(teacher, cfg.bits_w, cfg.bits_a, cfg.policy, cfg.init_norm)?;
    let mut reports = Vec::with_capacity(qm.num_blocks());
    for b in 0..qm.num_blocks() {
        reports.push(reconstruct_block(teacher, &mut qm, b, calib, cfg)?);
    }
    Ok((qm, reports))
}
