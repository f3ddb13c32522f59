use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::primitives::{
    init_act_step, init_step_pnorm, lsq_act_quant, lsq_fake_quant, rectified_sigmoid, rectified_sigmoid_inverse,
    soft_quant_weights, Bounds, TINY_STEP,
};
use super::QuantError;
use crate::nn::arch::ArchConfig;
use crate::nn::model::{Layer, ModelGraph, BN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Which layers keep 8-bit precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantPolicy {
    /// First and last layer weights and the last layer's input at 8 bits.
    #[serde(rename = "first_last_8bit")]
    FirstLast8Bit,
    /// Every quantizer at the target bit width.
    Uniform,
}

/// How weights enter a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Folded full-precision weights.
    Float,
    /// Soft rounding through `h(V)`.
    Soft,
    /// Hardened integer weights.
    Hard,
}

/// Per-layer weight quantizer over BN-folded weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightQuant<T> {
    pub bits: u32,
    pub bounds: Bounds,
    /// Folded full-precision weight, output channel first.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Per-output-channel step `[O]`.
    pub step: Tensor<T>,
    pub zero_point: Vec<i32>,
    /// Soft-rounding logits, shaped like `weight`.
    pub v: Tensor<T>,
    /// Integer weights after [`QuantizedModel::finalize`].
    pub hard: Option<Vec<i32>>,
    /// Channels whose step came from a degenerate-range fallback.
    pub fallback_channels: Vec<usize>,
}

impl<T: Scalar> WeightQuant<T> {
    fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn per_channel(&self) -> usize {
        self.weight.numel() / self.channels()
    }

    /// `s * (w_int - z)` from the hardened integers.
    pub fn dequantized(&self) -> Option<Tensor<T>> {
        let ints = self.hard.as_ref()?;
        let per = self.per_channel();
        let data = ints
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let c = i / per;
                let z = T::lit(self.zero_point[c] as f64);
                self.step.data()[c] * (T::lit(q as f64) - z)
            })
            .collect();
        Some(Tensor::new(self.weight.shape().to_vec(), data).expect("same shape"))
    }

    /// Integers `clip(floor(W/s) + [h(V) >= 0.5] + z, n, p)`.
    pub fn harden(&self) -> Vec<i32> {
        let per = self.per_channel();
        self.weight
            .data()
            .iter()
            .zip(self.v.data())
            .enumerate()
            .map(|(i, (&w, &v))| {
                let c = i / per;
                let z = T::lit(self.zero_point[c] as f64);
                let bit = if rectified_sigmoid(v.as_f64()) >= 0.5 { T::one() } else { T::zero() };
                let q = ((w / self.step.data()[c]).floor() + bit + z)
                    .max(self.bounds.lo())
                    .min(self.bounds.hi());
                q.to_i32().expect("clipped to the integer range")
            })
            .collect()
    }

    pub fn h_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.v.data().iter().map(|v| rectified_sigmoid(v.as_f64()))
    }
}

/// Per-tensor symmetric activation quantizer at a layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuant<T> {
    pub bits: u32,
    pub bounds: Bounds,
    /// Scalar step; `None` until initialized from the first batch.
    pub step: Option<T>,
    pub fallback: bool,
}

/// Layer of the folded network. Batch norms are absorbed into the preceding
/// conv and left as `Folded` placeholders so block ranges stay aligned with
/// the source model.
#[derive(Debug, Clone, PartialEq)]
pub enum QLayer {
    Conv {
        name: String,
        stride: usize,
        padding: usize,
        /// Input quantizer, if any.
        act: Option<String>,
    },
    Folded,
    Relu,
    LeakyRelu(f64),
    Linear {
        name: String,
        act: Option<String>,
    },
    AvgPool(usize),
    GlobalAvgPool,
    Upsample,
    /// The input quantizer is shared by both branches.
    Residual {
        body: Vec<QLayer>,
        shortcut: Vec<QLayer>,
        relu: bool,
        act: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel<T> {
    pub arch: ArchConfig,
    pub layers: Vec<QLayer>,
    pub blocks: Vec<Range<usize>>,
    pub weights: BTreeMap<String, WeightQuant<T>>,
    pub acts: BTreeMap<String, ActQuant<T>>,
    pub policy: QuantPolicy,
    pub bits_w: u32,
    pub bits_a: u32,
    pub finalized: bool,
}

/// Which quantizer parameters become trainable graph leaves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub step: bool,
    pub v: bool,
    pub act: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct WeightVars {
    /// Effective weight for `Float`/`Hard`; raw folded weight for `Soft`.
    pub w: Var,
    pub b: Var,
    pub step: Option<Var>,
    pub zero_point: Option<Var>,
    pub v: Option<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct QBound {
    pub mode: Option<QuantMode>,
    pub weights: BTreeMap<String, WeightVars>,
    pub acts: BTreeMap<String, Var>,
}

/// Per-forward options.
pub struct QForward<'a> {
    pub quant_acts: bool,
    /// Activation quantizers subject to QDrop.
    pub qdrop_scope: Option<&'a BTreeSet<String>>,
    pub qdrop_prob: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Collects steps of uninitialized activation quantizers, computed from
    /// the values reaching them.
    pub act_init: Option<&'a mut BTreeMap<String, f64>>,
}

impl QForward<'_> {
    pub fn plain(quant_acts: bool) -> Self {
        Self {
            quant_acts,
            qdrop_scope: None,
            qdrop_prob: 0.0,
            rng: None,
            act_init: None,
        }
    }
}

struct Compiler<'a, T> {
    teacher: &'a ModelGraph<T>,
    seen_weight: bool,
    weight_order: Vec<String>,
    act_order: Vec<String>,
    /// Input quantizer name of each weight layer.
    act_of: BTreeMap<String, Option<String>>,
}

impl<T: Scalar> Compiler<'_, T> {
    fn compile(&mut self, layers: &[Layer], quantize_first_input: bool) -> Vec<QLayer> {
        let mut out = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let quant_input = quantize_first_input || i > 0;
            out.push(match layer {
                Layer::Conv { name, stride, padding, .. } => {
                    let act = self.input_quant(name, quant_input);
                    QLayer::Conv {
                        name: name.clone(),
                        stride: *stride,
                        padding: *padding,
                        act,
                    }
                }
                Layer::Bn { .. } => QLayer::Folded,
                Layer::Relu => QLayer::Relu,
                Layer::LeakyRelu(s) => QLayer::LeakyRelu(*s),
                Layer::Linear { name } => {
                    let act = self.input_quant(name, quant_input);
                    QLayer::Linear { name: name.clone(), act }
                }
                Layer::AvgPool(k) => QLayer::AvgPool(*k),
                Layer::GlobalAvgPool => QLayer::GlobalAvgPool,
                Layer::Upsample => QLayer::Upsample,
                Layer::Residual {
                    name,
                    body,
                    shortcut,
                    relu,
                } => {
                    let act = if self.seen_weight && quant_input {
                        let a = format!("{}.input", name);
                        self.act_order.push(a.clone());
                        Some(a)
                    } else {
                        None
                    };
                    let seen = self.seen_weight;
                    let body = self.compile(body, false);
                    let after_body = self.seen_weight;
                    self.seen_weight = seen;
                    let shortcut = self.compile(shortcut, false);
                    self.seen_weight |= after_body;
                    QLayer::Residual {
                        body,
                        shortcut,
                        relu: *relu,
                        act,
                    }
                }
            });
        }
        out
    }

    fn input_quant(&mut self, name: &str, quant_input: bool) -> Option<String> {
        let act = (self.seen_weight && quant_input).then(|| format!("{}.input", name));
        if let Some(a) = &act {
            self.act_order.push(a.clone());
        }
        self.seen_weight = true;
        self.weight_order.push(name.to_string());
        self.act_of.insert(name.to_string(), act.clone());
        act
    }
}

/// BN-folded weight and bias of the weight layer `name`.
fn folded<T: Scalar>(teacher: &ModelGraph<T>, layers: &[Layer], name: &str) -> (Tensor<T>, Tensor<T>) {
    let w = teacher.param(&format!("{}.weight", name));
    let out = w.shape()[0];
    let bias = teacher
        .params
        .get(&format!("{}.bias", name))
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[out]));
    let Some(bn) = bn_after(layers, name) else {
        return (w.clone(), bias);
    };
    let gamma = teacher.param(&format!("{}.weight", bn));
    let beta = teacher.param(&format!("{}.bias", bn));
    let st = &teacher.bn_stats[&bn];
    let per = w.numel() / out;
    let scale: Vec<f64> = (0..out)
        .map(|c| gamma.data()[c].as_f64() / (st.var[c].as_f64() + BN_EPS).sqrt())
        .collect();
    let wd = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| T::lit(v.as_f64() * scale[i / per]))
        .collect();
    let bd = (0..out)
        .map(|c| {
            let b = bias.data()[c].as_f64() - st.mean[c].as_f64();
            T::lit(b * scale[c] + beta.data()[c].as_f64())
        })
        .collect();
    (
        Tensor::new(w.shape().to_vec(), wd).expect("same shape"),
        Tensor::new(vec![out], bd).expect("1-d"),
    )
}

/// Name of the BN directly following the conv `name`, searching nested lists.
fn bn_after(layers: &[Layer], name: &str) -> Option<String> {
    for (i, l) in layers.iter().enumerate() {
        match l {
            Layer::Conv { name: n, .. } if n == name => {
                return match layers.get(i + 1) {
                    Some(Layer::Bn { name }) => Some(name.clone()),
                    _ => None,
                };
            }
            Layer::Residual { body, shortcut, .. } => {
                if let Some(b) = bn_after(body, name).or_else(|| bn_after(shortcut, name)) {
                    return Some(b);
                }
            }
            _ => {}
        }
    }
    None
}

/// Weight and activation quantizer names used inside `layers`.
fn quantizers_in(layers: &[QLayer], w: &mut Vec<String>, a: &mut Vec<String>) {
    for l in layers {
        match l {
            QLayer::Conv { name, act, .. } | QLayer::Linear { name, act } => {
                w.push(name.clone());
                a.extend(act.iter().cloned());
            }
            QLayer::Residual { body, shortcut, act, .. } => {
                a.extend(act.iter().cloned());
                quantizers_in(body, w, a);
                quantizers_in(shortcut, w, a);
            }
            _ => {}
        }
    }
}

impl<T: Scalar> QuantizedModel<T> {
    /// Folds batch norm into the convs and initializes every weight
    /// quantizer: p-norm step search, zero points, and `V` so that
    /// `h(V)` equals the fractional part of `W/s`. Activation steps are left
    /// for the first calibration batch.
    pub fn prepare(
        teacher: &ModelGraph<T>,
        bits_w: u32,
        bits_a: u32,
        policy: QuantPolicy,
        p_ord: f64,
    ) -> Result<Self, QuantError> {
        Bounds::asymmetric(bits_w)?;
        Bounds::symmetric(bits_a)?;
        let mut c = Compiler {
            teacher,
            seen_weight: false,
            weight_order: Vec::new(),
            act_order: Vec::new(),
            act_of: BTreeMap::new(),
        };
        let layers = c.compile(&teacher.layers, true);
        let _ = c.teacher;
        let first = c.weight_order.first().cloned();
        let last = c.weight_order.last().cloned();
        let eight = policy == QuantPolicy::FirstLast8Bit;
        let mut weights = BTreeMap::new();
        for name in &c.weight_order {
            let edge = Some(name) == first.as_ref() || Some(name) == last.as_ref();
            let bits = if eight && edge { 8 } else { bits_w };
            let bounds = Bounds::asymmetric(bits)?;
            let (weight, bias) = folded(teacher, &teacher.layers, name);
            let steps = init_step_pnorm(&weight, bits, p_ord)?;
            let out = weight.shape()[0];
            let per = weight.numel() / out;
            let step = Tensor::new(vec![out], steps.iter().map(|s| T::lit(s.step)).collect())?;
            let zero_point: Vec<i32> = steps.iter().map(|s| s.zero_point).collect();
            let fallback_channels = steps.iter().enumerate().filter(|(_, s)| s.fallback).map(|(i, _)| i).collect();
            let v = weight
                .data()
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let r = w / step.data()[i / per];
                    let frac = (r - r.floor()).as_f64().clamp(1e-4, 1.0 - 1e-4);
                    T::lit(rectified_sigmoid_inverse(frac))
                })
                .collect();
            let v = Tensor::new(weight.shape().to_vec(), v)?;
            weights.insert(
                name.clone(),
                WeightQuant {
                    bits,
                    bounds,
                    weight,
                    bias,
                    step,
                    zero_point,
                    v,
                    hard: None,
                    fallback_channels,
                },
            );
        }
        let last_input = last.as_ref().and_then(|l| c.act_of.get(l).cloned().flatten());
        let mut acts = BTreeMap::new();
        for name in &c.act_order {
            let bits = if eight && Some(name) == last_input.as_ref() { 8 } else { bits_a };
            acts.insert(
                name.clone(),
                ActQuant {
                    bits,
                    bounds: Bounds::symmetric(bits)?,
                    step: None,
                    fallback: false,
                },
            );
        }
        Ok(Self {
            arch: teacher.arch.clone(),
            layers,
            blocks: teacher.blocks.clone(),
            weights,
            acts,
            policy,
            bits_w,
            bits_a,
            finalized: false,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Weight and activation quantizer names of one block.
    pub fn block_quantizers(&self, block: usize) -> Result<(Vec<String>, Vec<String>), QuantError> {
        let range = self.blocks.get(block).cloned().ok_or(QuantError::BlockIndex(block))?;
        let (mut w, mut a) = (Vec::new(), Vec::new());
        quantizers_in(&self.layers[range], &mut w, &mut a);
        Ok((w, a))
    }

    /// Binds the named quantizers (all when `names` is `None`).
    pub fn bind(
        &self,
        g: &mut Graph<T>,
        names: Option<(&[String], &[String])>,
        mode: QuantMode,
        trainable: Trainable,
    ) -> Result<QBound, QuantError> {
        let all_w: Vec<String>;
        let all_a: Vec<String>;
        let (wn, an) = match names {
            Some(n) => n,
            None => {
                all_w = self.weights.keys().cloned().collect();
                all_a = self.acts.keys().cloned().collect();
                (&all_w[..], &all_a[..])
            }
        };
        let mut bound = QBound {
            mode: Some(mode),
            ..Default::default()
        };
        for name in wn {
            let q = &self.weights[name];
            let b = g.constant(&q.bias);
            let vars = match mode {
                QuantMode::Float => WeightVars {
                    w: g.constant(&q.weight),
                    b,
                    step: None,
                    zero_point: None,
                    v: None,
                },
                QuantMode::Hard => {
                    let deq = q.dequantized().ok_or(QuantError::NotFinalized)?;
                    WeightVars {
                        w: g.constant(&deq),
                        b,
                        step: None,
                        zero_point: None,
                        v: None,
                    }
                }
                QuantMode::Soft => {
                    let leaf = |g: &mut Graph<T>, t: &Tensor<T>, train: bool| {
                        if train {
                            g.param(t)
                        } else {
                            g.constant(t)
                        }
                    };
                    let z = Tensor::new(
                        vec![q.zero_point.len()],
                        q.zero_point.iter().map(|&z| T::lit(z as f64)).collect(),
                    )?;
                    WeightVars {
                        w: g.constant(&q.weight),
                        b,
                        step: Some(leaf(g, &q.step, trainable.step)),
                        zero_point: Some(g.constant(&z)),
                        v: Some(leaf(g, &q.v, trainable.v)),
                    }
                }
            };
            bound.weights.insert(name.clone(), vars);
        }
        for name in an {
            if let Some(s) = self.acts[name].step {
                let t = Tensor::scalar(s);
                let v = if trainable.act { g.param(&t) } else { g.constant(&t) };
                bound.acts.insert(name.clone(), v);
            }
        }
        Ok(bound)
    }

    /// Runs block `block` on `x`.
    pub fn forward_block(
        &self,
        g: &mut Graph<T>,
        bound: &QBound,
        block: usize,
        x: Var,
        ctx: &mut QForward<'_>,
    ) -> Result<Var, QuantError> {
        let range = self.blocks.get(block).cloned().ok_or(QuantError::BlockIndex(block))?;
        self.run(g, bound, &self.layers[range], x, ctx)
    }

    /// Logits for `x`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &QBound, x: Var, ctx: &mut QForward<'_>) -> Result<Var, QuantError> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.arch.input {
            return Err(QuantError::Invalid(format!("input {:?} does not match arch {:?}", s, self.arch.input)));
        }
        let mut h = x;
        for b in 0..self.blocks.len() {
            h = self.forward_block(g, bound, b, h, ctx)?;
        }
        Ok(h)
    }

    fn act(&self, g: &mut Graph<T>, bound: &QBound, name: &str, x: Var, ctx: &mut QForward<'_>) -> Result<Var, QuantError> {
        if !ctx.quant_acts {
            return Ok(x);
        }
        let aq = &self.acts[name];
        let s = match bound.acts.get(name) {
            Some(&s) => s,
            None => {
                let init = ctx
                    .act_init
                    .as_deref_mut()
                    .ok_or_else(|| QuantError::Uninitialized(name.to_string()))?;
                let step = match init.get(name) {
                    Some(&s) => s,
                    None => {
                        let st = init_act_step(g.value(x), aq.bits)?;
                        init.insert(name.to_string(), st.step);
                        st.step
                    }
                };
                g.scalar(T::lit(step))
            }
        };
        let drop = match ctx.qdrop_scope {
            Some(scope) if scope.contains(name) => ctx.qdrop_prob,
            _ => 0.0,
        };
        if drop > 0.0 {
            let rng = ctx.rng.as_deref_mut().ok_or_else(|| QuantError::Invalid("QDrop needs an rng".into()))?;
            Ok(lsq_act_quant(g, x, s, aq.bounds, drop, rng)?)
        } else {
            Ok(lsq_fake_quant(g, x, s, aq.bounds)?)
        }
    }

    fn weight(&self, g: &mut Graph<T>, bound: &QBound, name: &str) -> Result<(Var, Var), QuantError> {
        let wv = bound
            .weights
            .get(name)
            .ok_or_else(|| QuantError::Invalid(format!("weight quantizer {} not bound", name)))?;
        let w = match (wv.step, wv.zero_point, wv.v) {
            (Some(s), Some(z), Some(v)) => soft_quant_weights(g, wv.w, s, z, v, self.weights[name].bounds)?,
            _ => wv.w,
        };
        Ok((w, wv.b))
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        bound: &QBound,
        layers: &[QLayer],
        mut h: Var,
        ctx: &mut QForward<'_>,
    ) -> Result<Var, QuantError> {
        for layer in layers {
            h = match layer {
                QLayer::Conv {
                    name,
                    stride,
                    padding,
                    act,
                } => {
                    let x = match act {
                        Some(a) => self.act(g, bound, a, h, ctx)?,
                        None => h,
                    };
                    let (w, b) = self.weight(g, bound, name)?;
                    g.conv2d(x, w, Some(b), *stride, *padding)?
                }
                QLayer::Linear { name, act } => {
                    let x = match act {
                        Some(a) => self.act(g, bound, a, h, ctx)?,
                        None => h,
                    };
                    let (w, b) = self.weight(g, bound, name)?;
                    g.linear(x, w, Some(b))?
                }
                QLayer::Folded => h,
                QLayer::Relu => g.relu(h)?,
                QLayer::LeakyRelu(s) => g.leaky_relu(h, T::lit(*s))?,
                QLayer::AvgPool(k) => g.avg_pool2d(h, *k)?,
                QLayer::GlobalAvgPool => g.global_avg_pool(h)?,
                QLayer::Upsample => g.upsample_nearest2x(h)?,
                QLayer::Residual {
                    body,
                    shortcut,
                    relu,
                    act,
                } => {
                    let x = match act {
                        Some(a) => self.act(g, bound, a, h, ctx)?,
                        None => h,
                    };
                    let a = self.run(g, bound, body, x, ctx)?;
                    let s = self.run(g, bound, shortcut, x, ctx)?;
                    let sum = g.add(a, s)?;
                    if *relu {
                        g.relu(sum)?
                    } else {
                        sum
                    }
                }
            };
        }
        Ok(h)
    }

    /// Logits for a batch of images without QDrop.
    pub fn predict(&self, images: &Tensor<T>, mode: QuantMode) -> Result<Tensor<T>, QuantError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, None, mode, Trainable::default())?;
        let x = g.constant(images);
        let y = self.forward(&mut g, &bound, x, &mut QForward::plain(mode != QuantMode::Float))?;
        Ok(g.tensor(y))
    }

    /// Output of blocks `0..upto` for `images`, evaluated in chunks.
    pub fn prefix(&self, images: &Tensor<T>, upto: usize, mode: QuantMode, chunk: usize) -> Result<Tensor<T>, QuantError> {
        if upto == 0 {
            return Ok(images.clone());
        }
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut g = Graph::new();
            let bound = self.bind(&mut g, None, mode, Trainable::default())?;
            let mut h = g.constant(&images.slice_batch(start, end));
            let mut ctx = QForward::plain(mode != QuantMode::Float);
            for b in 0..upto {
                h = self.forward_block(&mut g, &bound, b, h, &mut ctx)?;
            }
            parts.push(g.tensor(h));
            start = end;
        }
        Ok(Tensor::concat_batch(&parts)?)
    }

    /// Fraction of `h(V)` entries within `tol` of 0 or 1, over every layer.
    pub fn binarization(&self, tol: f64) -> f64 {
        let (mut close, mut total) = (0usize, 0usize);
        for q in self.weights.values() {
            for h in q.h_values() {
                total += 1;
                if h <= tol || h >= 1.0 - tol {
                    close += 1;
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            close as f64 / total as f64
        }
    }

    /// Hardened copy: `V` thresholded at `h(V) >= 0.5` and weights stored as
    /// integers.
    pub fn finalize(&self) -> Self {
        let mut out = self.clone();
        for q in out.weights.values_mut() {
            q.hard = Some(q.harden());
        }
        out.finalized = true;
        out
    }

    /// Keeps every step size positive after an optimizer update.
    pub(crate) fn clamp_steps(&mut self) {
        let tiny = T::lit(TINY_STEP);
        for q in self.weights.values_mut() {
            for s in q.step.data_mut() {
                if !(*s > tiny) {
                    *s = tiny;
                }
            }
        }
        for a in self.acts.values_mut() {
            if let Some(s) = a.step.as_mut() {
                if !(*s > tiny) {
                    *s = tiny;
                }
            }
        }
    }
}
