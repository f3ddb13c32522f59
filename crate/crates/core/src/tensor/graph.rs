use super::tensor::numel;
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// Right operand is a 1-D vector indexed by `axis` of the left operand.
    Channel { axis: usize },
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum UnaryKind<T> {
    Relu,
    LeakyRelu(T),
    Tanh,
    Sigmoid,
    Pow(T),
    Abs,
    Sqrt,
    Exp,
    Log,
    Clamp(T, T),
    FloorSte,
    RoundSte,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    AddScalar {
        a: usize,
    },
    MulScalar {
        a: usize,
        c: T,
    },
    Unary {
        kind: UnaryKind<T>,
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    ChannelMean {
        a: usize,
        axis: usize,
    },
    ChannelVar {
        a: usize,
        mean: usize,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    ReflectionPad {
        a: usize,
        pad: [usize; 4],
    },
    Crop {
        a: usize,
        top: usize,
        left: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Upsample2x {
        a: usize,
    },
    AvgPool {
        a: usize,
        k: usize,
    },
    GlobalAvgPool {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    LsqQuant {
        x: usize,
        s: usize,
        lo: T,
        hi: T,
        grad_scale: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

/// A single-use tape for one forward/backward computation.
///
/// Nodes are appended in construction order, so every op's inputs have
/// smaller indices than the op itself. Backward walks the tape in reverse,
/// which fixes the accumulation order and makes gradients reproducible.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn bcast_of(a: &[usize], b: &[usize], axis: Option<usize>) -> Result<Bcast, TensorError> {
    if let Some(axis) = axis {
        if b.len() == 1 && axis < a.len() && a[axis] == b[0] {
            return Ok(Bcast::Channel { axis });
        }
        return Err(TensorError::Shape(format!(
            "per-channel operand {:?} does not match axis {} of {:?}",
            b, axis, a
        )));
    }
    if a == b {
        Ok(Bcast::Same)
    } else if numel(b) == 1 {
        Ok(Bcast::Scalar)
    } else {
        Err(TensorError::Shape(format!("incompatible shapes {:?} and {:?}", a, b)))
    }
}

/// (outer, channels, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf; gradients are tracked if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        let value = t.into_data();
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (copies the data).
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let t = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("tensor invariant")
            .with_requires_grad(true);
        self.leaf(t)
    }

    /// Non-trainable leaf (copies the data).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("tensor invariant");
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- binary ---------------------------------------------------------

    fn binary(
        &mut self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        axis: Option<usize>,
    ) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].shape.clone();
        let bcast = bcast_of(&sa, &self.nodes[b.0].shape, axis)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if matches!(kind, BinaryKind::Div) && bv.iter().any(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero);
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = match bcast {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = bv[0];
                av.iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Channel { axis } => {
                let (outer, c, inner) = split_axis(&sa, axis);
                let mut out = Vec::with_capacity(av.len());
                for o in 0..outer {
                    for ch in 0..c {
                        let y = bv[ch];
                        let base = (o * c + ch) * inner;
                        out.extend(av[base..base + inner].iter().map(|&x| f(x, y)));
                    }
                }
                out
            }
        };
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.push(name, sa, out, Op::Binary { kind, a: a.0, b: b.0, bcast }, &[a.0, b.0])
    }

    /// Elementwise sum; `b` may also be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b, None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b, None)
    }

    /// `a + b[c]` where `b` is indexed by dimension `axis` of `a`.
    pub fn add_channel(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b, Some(axis))
    }

    pub fn sub_channel(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b, Some(axis))
    }

    pub fn mul_channel(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b, Some(axis))
    }

    pub fn div_channel(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b, Some(axis))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        self.push("add_scalar", shape, out, Op::AddScalar { a: a.0 }, &[a.0])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.push("mul_scalar", shape, out, Op::MulScalar { a: a.0, c }, &[a.0])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul_scalar(a, -T::one())
    }

    // ----- unary ----------------------------------------------------------

    fn unary(&mut self, kind: UnaryKind<T>, a: Var) -> Result<Var, TensorError> {
        let half = T::lit(0.5);
        let f = |x: T| -> T {
            match kind {
                UnaryKind::Relu => x.max(T::zero()),
                UnaryKind::LeakyRelu(s) => {
                    if x > T::zero() {
                        x
                    } else {
                        x * s
                    }
                }
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Pow(e) => x.powf(e),
                UnaryKind::Abs => x.abs(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Clamp(lo, hi) => x.max(lo).min(hi),
                UnaryKind::FloorSte => x.floor(),
                // half away from zero, independent of platform rounding mode
                UnaryKind::RoundSte => (x.abs() + half).floor() * x.signum(),
            }
        };
        let name = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::LeakyRelu(_) => "leaky_relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Pow(_) => "pow",
            UnaryKind::Abs => "abs",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Clamp(..) => "clamp",
            UnaryKind::FloorSte => "floor_ste",
            UnaryKind::RoundSte => "round_ste",
        };
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(name, shape, out, Op::Unary { kind, a: a.0 }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var, TensorError> {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn pow(&mut self, a: Var, exponent: T) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Pow(exponent), a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul(a, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Log, a)
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        if lo > hi {
            return Err(TensorError::Invalid(format!("clamp bounds {} > {}", lo, hi)));
        }
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    /// Floor forward, identity backward.
    pub fn floor_ste(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::FloorSte, a)
    }

    /// Round-half-away-from-zero forward, identity backward.
    pub fn round_ste(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::RoundSte, a)
    }

    // ----- reductions & shape ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.nodes[a.0].value.iter().copied().sum::<T>();
        self.push("sum", vec![1], vec![s], Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.0].value;
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push("mean", vec![1], vec![s], Op::Mean { a: a.0 }, &[a.0])
    }

    /// Mean over every dimension except `axis`; output shape `[C]`.
    pub fn channel_mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Shape(format!("axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        let v = &self.nodes[a.0].value;
        let mut acc = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, slot) in acc.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *slot += v[base..base + inner].iter().copied().sum::<T>();
            }
        }
        let count = T::lit((outer * inner) as f64);
        let out = acc.into_iter().map(|s| s / count).collect();
        self.push("channel_mean", vec![c], out, Op::ChannelMean { a: a.0, axis }, &[a.0])
    }

    /// Biased (population) variance per `axis` channel around the given mean.
    pub fn channel_var(&mut self, a: Var, mean: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, c, inner) = split_axis(&shape, axis);
        if self.nodes[mean.0].shape != [c] {
            return Err(TensorError::Shape(format!(
                "mean shape {:?} does not match {} channels",
                self.nodes[mean.0].shape, c
            )));
        }
        let v = &self.nodes[a.0].value;
        let m = &self.nodes[mean.0].value;
        let mut acc = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let mu = m[ch];
                acc[ch] += v[base..base + inner]
                    .iter()
                    .map(|&x| (x - mu) * (x - mu))
                    .sum::<T>();
            }
        }
        let count = T::lit((outer * inner) as f64);
        let out = acc.into_iter().map(|s| s / count).collect();
        self.push(
            "channel_var",
            vec![c],
            out,
            Op::ChannelVar { a: a.0, mean: mean.0, axis },
            &[a.0, mean.0],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let out = self.nodes[a.0].value.clone();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a: a.0 }, &[a.0])
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`, accumulating into every
    /// reachable node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.shape.clone()));
        }
        if !node.value[0].is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        if !node.needs_grad {
            return Ok(());
        }
        self.accumulate(loss.0, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, id: usize, g: Vec<T>) {
        let node = &mut self.nodes[id];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.len());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    pub(crate) fn wants_grad(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn reduce_bcast(&self, g: &[T], shape: &[usize], bcast: Bcast, b_len: usize) -> Vec<T> {
        match bcast {
            Bcast::Same => g.to_vec(),
            Bcast::Scalar => {
                debug_assert_eq!(b_len, 1);
                vec![g.iter().copied().sum::<T>()]
            }
            Bcast::Channel { axis } => {
                let (outer, c, inner) = split_axis(shape, axis);
                let mut acc = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, slot) in acc.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *slot += g[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                acc
            }
        }
    }

    /// Expands a right-hand operand to the left operand's layout.
    fn expand(&self, bv: &[T], shape: &[usize], bcast: Bcast) -> Vec<T> {
        match bcast {
            Bcast::Same => bv.to_vec(),
            Bcast::Scalar => vec![bv[0]; numel(shape)],
            Bcast::Channel { axis } => {
                let (outer, c, inner) = split_axis(shape, axis);
                let mut out = Vec::with_capacity(outer * c * inner);
                for _ in 0..outer {
                    for &y in bv.iter().take(c) {
                        out.extend(std::iter::repeat_n(y, inner));
                    }
                }
                out
            }
        }
    }

    fn backprop(&mut self, id: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let shape = self.nodes[id].shape.clone();
                let b_len = self.nodes[b].value.len();
                let (ga, gb) = {
                    let av = &self.nodes[a].value;
                    let bx = self.expand(&self.nodes[b].value, &shape, bcast);
                    match kind {
                        BinaryKind::Add => (g.to_vec(), self.reduce_bcast(g, &shape, bcast, b_len)),
                        BinaryKind::Sub => {
                            let gb: Vec<T> = self
                                .reduce_bcast(g, &shape, bcast, b_len)
                                .into_iter()
                                .map(|v| -v)
                                .collect();
                            (g.to_vec(), gb)
                        }
                        BinaryKind::Mul => {
                            let ga: Vec<T> = g.iter().zip(&bx).map(|(&gi, &y)| gi * y).collect();
                            let prod: Vec<T> = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                            (ga, self.reduce_bcast(&prod, &shape, bcast, b_len))
                        }
                        BinaryKind::Div => {
                            let ga: Vec<T> = g.iter().zip(&bx).map(|(&gi, &y)| gi / y).collect();
                            let prod: Vec<T> = g
                                .iter()
                                .zip(av)
                                .zip(&bx)
                                .map(|((&gi, &x), &y)| -gi * x / (y * y))
                                .collect();
                            (ga, self.reduce_bcast(&prod, &shape, bcast, b_len))
                        }
                    }
                };
                if a == b {
                    let sum = ga.iter().zip(&gb).map(|(&x, &y)| x + y).collect();
                    self.accumulate(a, sum);
                } else {
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
            }
            Op::AddScalar { a } => self.accumulate(a, g.to_vec()),
            Op::MulScalar { a, c } => self.accumulate(a, g.iter().map(|&v| v * c).collect()),
            Op::Unary { kind, a } => {
                let x = &self.nodes[a].value;
                let y = &self.nodes[id].value;
                let half = T::lit(0.5);
                let ga: Vec<T> = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::LeakyRelu(s) => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    s
                                }
                            }
                            UnaryKind::Tanh => T::one() - yi * yi,
                            UnaryKind::Sigmoid => yi * (T::one() - yi),
                            UnaryKind::Pow(e) => e * xi.powf(e - T::one()),
                            UnaryKind::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Sqrt => half / yi,
                            UnaryKind::Exp => yi,
                            UnaryKind::Log => T::one() / xi,
                            UnaryKind::Clamp(lo, hi) => {
                                if xi >= lo && xi <= hi {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::FloorSte | UnaryKind::RoundSte => T::one(),
                        };
                        gi * d
                    })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::Sum { a } => {
                let n = self.nodes[a].value.len();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.nodes[a].value.len();
                let v = g[0] / T::lit(n as f64);
                self.accumulate(a, vec![v; n]);
            }
            Op::ChannelMean { a, axis } => {
                let shape = self.nodes[a].shape.clone();
                let (outer, c, inner) = split_axis(&shape, axis);
                let count = T::lit((outer * inner) as f64);
                let scaled: Vec<T> = g.iter().map(|&v| v / count).collect();
                let ga = self.expand(&scaled, &shape, Bcast::Channel { axis });
                debug_assert_eq!(scaled.len(), c);
                self.accumulate(a, ga);
            }
            Op::ChannelVar { a, mean, axis } => {
                let shape = self.nodes[a].shape.clone();
                let (outer, c, inner) = split_axis(&shape, axis);
                let count = T::lit((outer * inner) as f64);
                let two = T::lit(2.0);
                let x = &self.nodes[a].value;
                let m = &self.nodes[mean].value;
                let mut ga = vec![T::zero(); x.len()];
                let mut gm = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let k = two * g[ch] / count;
                        for idx in base..base + inner {
                            let d = k * (x[idx] - m[ch]);
                            ga[idx] = d;
                            gm[ch] -= d;
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(mean, gm);
            }
            Op::Reshape { a } => self.accumulate(a, g.to_vec()),
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(id, x, w, b, stride, pad, g),
            Op::ReflectionPad { a, pad } => self.reflection_pad_backward(a, pad, g),
            Op::Crop { a, top, left } => self.crop_backward(id, a, top, left, g),
            Op::Linear { x, w, b } => self.linear_backward(x, w, b, g),
            Op::Upsample2x { a } => self.upsample_backward(a, g),
            Op::AvgPool { a, k } => self.avg_pool_backward(a, k, g),
            Op::GlobalAvgPool { a } => self.global_avg_pool_backward(a, g),
            Op::CrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let k = self.nodes[logits].shape[1];
                let n = labels.len();
                let scale = g[0] / T::lit(n as f64);
                let mut gl = probs.clone();
                for (row, &lab) in labels.iter().enumerate() {
                    gl[row * k + lab] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(logits, gl);
            }
            Op::LsqQuant {
                x,
                s,
                lo,
                hi,
                grad_scale,
            } => self.lsq_backward(x, s, lo, hi, grad_scale, g),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
