use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchConfig, LayerSpec};
use super::ModelError;
use crate::distill::swing::{swing_conv2d, SwingConfig};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Compiled layer with parameter names resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Bn {
        name: String,
    },
    Relu,
    LeakyRelu(f64),
    Linear {
        name: String,
    },
    AvgPool(usize),
    GlobalAvgPool,
    Upsample,
    Residual {
        name: String,
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
        relu: bool,
    },
}

/// Running statistics of one batch-norm layer (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// `sqrt(var + eps)`, the reference standard deviation.
    pub fn std(&self) -> Vec<T> {
        let eps = T::lit(BN_EPS);
        self.var.iter().map(|&v| (v + eps).sqrt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    pub arch: ArchConfig,
    pub layers: Vec<Layer>,
    pub params: BTreeMap<String, Tensor<T>>,
    pub bn_stats: BTreeMap<String, RunningStats<T>>,
    /// Partition of `layers` into reconstruction blocks.
    pub blocks: Vec<Range<usize>>,
    /// BN layer names in forward order.
    pub bn_order: Vec<String>,
}

/// How batch-norm layers normalize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnUse {
    /// Running statistics (inference).
    Running,
    /// Statistics of the current batch (training, distillation).
    Batch,
}

pub struct ForwardOpts<'a> {
    pub bn: BnUse,
    pub tap_bn: bool,
    pub tap_blocks: bool,
    pub swing: Option<&'a mut SwingConfig>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        Self {
            bn: BnUse::Running,
            tap_bn: false,
            tap_blocks: false,
            swing: None,
        }
    }

    pub fn train() -> Self {
        Self {
            bn: BnUse::Batch,
            tap_bn: true,
            tap_blocks: false,
            swing: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnTap {
    pub mean: Var,
    pub std: Var,
}

#[derive(Debug, Clone, Default)]
pub struct TapRecord {
    /// One entry per BN layer, in `bn_order`.
    pub bn: Vec<BnTap>,
    /// Output of every reconstruction block.
    pub blocks: Vec<Var>,
}

/// Graph handles for every parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

fn compile(specs: &[LayerSpec], prefix: &str, out: &mut Vec<Layer>, bn_order: &mut Vec<String>) {
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{}.{}", prefix, i);
        let layer = match spec {
            LayerSpec::Conv { stride, padding, bias, .. } => Layer::Conv {
                name,
                stride: *stride,
                padding: *padding,
                bias: *bias,
            },
            LayerSpec::Bn => {
                bn_order.push(name.clone());
                Layer::Bn { name }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(*slope),
            LayerSpec::Linear { .. } => Layer::Linear { name },
            LayerSpec::AvgPool { kernel } => Layer::AvgPool(*kernel),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Upsample => Layer::Upsample,
            LayerSpec::Residual { body, shortcut, relu } => {
                let mut b = Vec::new();
                let mut s = Vec::new();
                compile(body, &format!("{}.body", name), &mut b, bn_order);
                compile(shortcut, &format!("{}.shortcut", name), &mut s, bn_order);
                Layer::Residual {
                    name,
                    body: b,
                    shortcut: s,
                    relu: *relu,
                }
            }
        };
        out.push(layer);
    }
}

/// Blocks close after every top-level activation and every residual layer;
/// whatever trails the last boundary forms the final block.
fn partition(layers: &[Layer]) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for (i, l) in layers.iter().enumerate() {
        if matches!(l, Layer::Relu | Layer::LeakyRelu(_) | Layer::Residual { .. }) {
            blocks.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < layers.len() {
        blocks.push(start..layers.len());
    }
    blocks
}

struct Init<'a, T> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Tensor<T>>,
    stats: &'a mut BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> Init<'_, T> {
    /// Kaiming-uniform with fan-in, gain sqrt(2): bound = sqrt(6 / fan_in).
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::uniform(shape, bound, &mut self.rng)
    }

    fn run(&mut self, specs: &[LayerSpec], prefix: &str, mut c: usize) -> usize {
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{}.{}", prefix, i);
            match spec {
                LayerSpec::Conv { out, kernel, bias, .. } => {
                    let w = self.kaiming(&[*out, c, *kernel, *kernel], c * kernel * kernel);
                    self.params.insert(format!("{}.weight", name), w);
                    if *bias {
                        self.params.insert(format!("{}.bias", name), Tensor::zeros(&[*out]));
                    }
                    c = *out;
                }
                LayerSpec::Bn => {
                    self.params.insert(format!("{}.weight", name), Tensor::full(&[c], T::one()));
                    self.params.insert(format!("{}.bias", name), Tensor::zeros(&[c]));
                    self.stats.insert(
                        name,
                        RunningStats {
                            mean: vec![T::zero(); c],
                            var: vec![T::one(); c],
                        },
                    );
                }
                LayerSpec::Linear { out } => {
                    let bound = (1.0 / c as f64).sqrt();
                    let w = Tensor::uniform(&[*out, c], bound, &mut self.rng);
                    let b = Tensor::uniform(&[*out], bound, &mut self.rng);
                    self.params.insert(format!("{}.weight", name), w);
                    self.params.insert(format!("{}.bias", name), b);
                    c = *out;
                }
                LayerSpec::Residual { body, shortcut, .. } => {
                    let out = self.run(body, &format!("{}.body", name), c);
                    self.run(shortcut, &format!("{}.shortcut", name), c);
                    c = out;
                }
                _ => {}
            }
        }
        c
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds a freshly initialized model; identical config and seed give
    /// bit-identical parameters.
    pub fn build(arch: &ArchConfig) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut bn_order = Vec::new();
        compile(&arch.layers, "layers", &mut layers, &mut bn_order);
        let mut params = BTreeMap::new();
        let mut bn_stats = BTreeMap::new();
        Init {
            rng: ChaCha8Rng::seed_from_u64(arch.seed),
            params: &mut params,
            stats: &mut bn_stats,
        }
        .run(&arch.layers, "layers", arch.input[0]);
        let blocks = partition(&layers);
        Ok(Self {
            arch: arch.clone(),
            layers,
            params,
            bn_stats,
            blocks,
            bn_order,
        })
    }

    pub fn num_bn(&self) -> usize {
        self.bn_order.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    /// Puts every parameter on the graph, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t) } else { g.constant(t) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from the graph into the parameter tensors.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (name, t) in self.params.iter_mut() {
            let grad = g
                .grad(bound.vars[name])
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(grad).expect("gradient shape matches parameter");
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<(), ModelError> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.arch.input {
            return Err(ModelError::Input(format!(
                "expected [N, {}, {}, {}], got {:?}",
                self.arch.input[0], self.arch.input[1], self.arch.input[2], s
            )));
        }
        Ok(())
    }

    /// Full forward returning logits and the requested taps.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        opts: &mut ForwardOpts<'_>,
    ) -> Result<(Var, TapRecord), ModelError> {
        self.check_input(g, x)?;
        if opts.tap_bn && self.bn_order.is_empty() {
            return Err(ModelError::NoBatchNorm);
        }
        let mut taps = TapRecord::default();
        let mut h = x;
        for bi in 0..self.blocks.len() {
            h = self.forward_block(g, bound, bi, h, opts, &mut taps)?;
            if opts.tap_blocks {
                taps.blocks.push(h);
            }
        }
        Ok((h, taps))
    }

    /// Eval-mode logits without taps.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        Ok(self.forward_with_taps(g, bound, x, &mut ForwardOpts::eval())?.0)
    }

    /// Runs only reconstruction block `block`.
    pub fn forward_block(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        block: usize,
        x: Var,
        opts: &mut ForwardOpts<'_>,
        taps: &mut TapRecord,
    ) -> Result<Var, ModelError> {
        let range = self
            .blocks
            .get(block)
            .cloned()
            .ok_or(ModelError::BlockIndex(block))?;
        self.run_layers(g, bound, &self.layers[range], x, opts, taps)
    }

    fn run_layers(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        layers: &[Layer],
        mut h: Var,
        opts: &mut ForwardOpts<'_>,
        taps: &mut TapRecord,
    ) -> Result<Var, ModelError> {
        for layer in layers {
            h = match layer {
                Layer::Conv { name, stride, padding, bias } => {
                    let w = bound.get(&format!("{}.weight", name));
                    let b = bias.then(|| bound.get(&format!("{}.bias", name)));
                    match opts.swing.as_deref_mut() {
                        Some(cfg) if cfg.enabled && *stride > 1 => {
                            swing_conv2d(g, h, w, b, *stride, *padding, cfg)
                                .map_err(|e| ModelError::Swing(e.to_string()))?
                        }
                        _ => g.conv2d(h, w, b, *stride, *padding)?,
                    }
                }
                Layer::Bn { name } => {
                    let gamma = bound.get(&format!("{}.weight", name));
                    let beta = bound.get(&format!("{}.bias", name));
                    let eps = T::lit(BN_EPS);
                    match opts.bn {
                        BnUse::Batch => {
                            let out = g.batchnorm2d(h, gamma, beta, BnMode::Train, eps)?;
                            if opts.tap_bn {
                                taps.bn.push(BnTap {
                                    mean: out.batch_mean.expect("train mode"),
                                    std: out.batch_std.expect("train mode"),
                                });
                            }
                            out.out
                        }
                        BnUse::Running => {
                            if opts.tap_bn {
                                let mean = g.channel_mean(h, 1)?;
                                let var = g.channel_var(h, mean, 1)?;
                                let ve = g.add_scalar(var, eps)?;
                                let std = g.sqrt(ve)?;
                                taps.bn.push(BnTap { mean, std });
                            }
                            let st = &self.bn_stats[name];
                            g.batchnorm2d(
                                h,
                                gamma,
                                beta,
                                BnMode::Eval {
                                    mean: &st.mean,
                                    var: &st.var,
                                },
                                eps,
                            )?
                            .out
                        }
                    }
                }
                Layer::Relu => g.relu(h)?,
                Layer::LeakyRelu(s) => g.leaky_relu(h, T::lit(*s))?,
                Layer::Linear { name } => {
                    let w = bound.get(&format!("{}.weight", name));
                    let b = bound.get(&format!("{}.bias", name));
                    g.linear(h, w, Some(b))?
                }
                Layer::AvgPool(k) => g.avg_pool2d(h, *k)?,
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Upsample => g.upsample_nearest2x(h)?,
                Layer::Residual { body, shortcut, relu, .. } => {
                    let a = self.run_layers(g, bound, body, h, opts, taps)?;
                    let s = self.run_layers(g, bound, shortcut, h, opts, taps)?;
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

    /// Eval-mode logits for a batch of images, without gradient tracking.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(images);
        let y = self.forward(&mut g, &bound, x)?;
        Ok(g.tensor(y))
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                            var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
            blocks: self.blocks.clone(),
            bn_order: self.bn_order.clone(),
        }
    }
}

/// Top-1 accuracy in percent, evaluated in chunks of `batch`.
pub fn accuracy<T: Scalar>(
    logits_fn: impl Fn(&Tensor<T>) -> Result<Tensor<T>, ModelError>,
    images: &Tensor<T>,
    labels: &[usize],
    batch: usize,
) -> Result<f64, ModelError> {
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let logits = logits_fn(&images.slice_batch(start, end))?;
        let k = logits.shape()[1];
        for (row, &lab) in logits.data().chunks(k).zip(&labels[start..end]) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == lab {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(100.0 * correct as f64 / n as f64)
}
