//! Structured ops: padding, cropping, affine, pooling, normalization, losses.

use super::graph::{Graph, Op, Var};
use super::TensorError;
use crate::scalar::Scalar;

/// Which statistics a batch-norm call normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize by the statistics of the current batch and expose them.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Result of [`Graph::batchnorm2d`].
///
/// In train mode `batch_mean` and `batch_std` are differentiable graph values;
/// `batch_std` is `sqrt(biased_var + eps)`.
#[derive(Debug, Clone, Copy)]
pub struct BnOutput {
    pub out: Var,
    pub batch_mean: Option<Var>,
    pub batch_std: Option<Var>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

impl<T: Scalar> Graph<T> {
    fn nchw(&self, a: Var, op: &str) -> Result<[usize; 4], TensorError> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(TensorError::Shape(format!("{} expects NCHW input, got {:?}", op, s)));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Mirror padding that excludes the border pixel; `pad = (left, right, top, bottom)`.
    pub fn reflection_pad2d(&mut self, a: Var, pad: (usize, usize, usize, usize)) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw(a, "reflection_pad2d")?;
        let (l, r, t, b) = pad;
        if l >= w || r >= w || t >= h || b >= h {
            return Err(TensorError::Invalid(format!(
                "reflection pad {:?} must be smaller than spatial dims {}x{}",
                pad, h, w
            )));
        }
        let (oh, ow) = (h + t + b, w + l + r);
        let v = self.value(a);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in v.chunks(h * w) {
            for oy in 0..oh {
                let iy = reflect(oy as isize - t as isize, h);
                let row = &plane[iy * w..(iy + 1) * w];
                out.extend((0..ow).map(|ox| row[reflect(ox as isize - l as isize, w)]));
            }
        }
        self.push(
            "reflection_pad2d",
            vec![n, c, oh, ow],
            out,
            Op::ReflectionPad { a: a.0, pad: [l, r, t, b] },
            &[a.0],
        )
    }

    pub(crate) fn reflection_pad_backward(&mut self, a: usize, pad: [usize; 4], g: &[T]) {
        let s = self.nodes[a].shape.clone();
        let (h, w) = (s[2], s[3]);
        let [l, r, t, b] = pad;
        let (oh, ow) = (h + t + b, w + l + r);
        let mut ga = vec![T::zero(); self.nodes[a].value.len()];
        for (plane, gp) in ga.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for oy in 0..oh {
                let iy = reflect(oy as isize - t as isize, h);
                for ox in 0..ow {
                    let ix = reflect(ox as isize - l as isize, w);
                    plane[iy * w + ix] += gp[oy * ow + ox];
                }
            }
        }
        self.accumulate(a, ga);
    }

    /// Spatial window `[top, top+height) x [left, left+width)`.
    pub fn crop2d(&mut self, a: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw(a, "crop2d")?;
        if top + height > h || left + width > w {
            return Err(TensorError::Invalid(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                height, width, top, left, h, w
            )));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in v.chunks(h * w) {
            for y in top..top + height {
                out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        self.push(
            "crop2d",
            vec![n, c, height, width],
            out,
            Op::Crop { a: a.0, top, left },
            &[a.0],
        )
    }

    pub(crate) fn crop_backward(&mut self, id: usize, a: usize, top: usize, left: usize, g: &[T]) {
        let s = self.nodes[a].shape.clone();
        let (h, w) = (s[2], s[3]);
        let (ch, cw) = (self.nodes[id].shape[2], self.nodes[id].shape[3]);
        let mut ga = vec![T::zero(); self.nodes[a].value.len()];
        for (plane, gp) in ga.chunks_mut(h * w).zip(g.chunks(ch * cw)) {
            for y in 0..ch {
                plane[(top + y) * w + left..(top + y) * w + left + cw]
                    .copy_from_slice(&gp[y * cw..(y + 1) * cw]);
            }
        }
        self.accumulate(a, ga);
    }

    /// `x [N, D] · wᵀ + b`, with `w` shaped `[M, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::Shape(format!(
                "linear expects [N, D] x [M, D], got {:?} and {:?}",
                xs, ws
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(TensorError::Shape(format!("linear bias {:?} vs {} outputs", self.shape(b), m)));
            }
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            d,
            m,
            T::one(),
            self.value(x),
            (d as isize, 1),
            self.value(w),
            (1, d as isize),
            T::zero(),
            &mut out,
            (m as isize, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            "linear",
            vec![n, m],
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        )
    }

    pub(crate) fn linear_backward(&mut self, x: usize, w: usize, b: Option<usize>, g: &[T]) {
        let (n, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let m = self.nodes[w].shape[0];
        if self.wants_grad(x) {
            let mut gx = vec![T::zero(); n * d];
            T::gemm(
                n,
                m,
                d,
                T::one(),
                g,
                (m as isize, 1),
                &self.nodes[w].value,
                (d as isize, 1),
                T::zero(),
                &mut gx,
                (d as isize, 1),
            );
            self.accumulate(x, gx);
        }
        if self.wants_grad(w) {
            let mut gw = vec![T::zero(); m * d];
            T::gemm(
                m,
                n,
                d,
                T::one(),
                g,
                (1, m as isize),
                &self.nodes[x].value,
                (d as isize, 1),
                T::zero(),
                &mut gw,
                (d as isize, 1),
            );
            self.accumulate(w, gw);
        }
        if let Some(b) = b {
            if self.wants_grad(b) {
                let mut gb = vec![T::zero(); m];
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                self.accumulate(b, gb);
            }
        }
    }

    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw(a, "upsample_nearest2x")?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for plane in v.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                out.extend((0..2 * w).map(|x| row[x / 2]));
            }
        }
        self.push("upsample_nearest2x", vec![n, c, 2 * h, 2 * w], out, Op::Upsample2x { a: a.0 }, &[a.0])
    }

    pub(crate) fn upsample_backward(&mut self, a: usize, g: &[T]) {
        let s = self.nodes[a].shape.clone();
        let (h, w) = (s[2], s[3]);
        let mut ga = vec![T::zero(); self.nodes[a].value.len()];
        for (plane, gp) in ga.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    plane[(y / 2) * w + x / 2] += gp[y * 2 * w + x];
                }
            }
        }
        self.accumulate(a, ga);
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw(a, "avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Invalid(format!("avg_pool2d kernel {} does not tile {}x{}", k, h, w)));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let v = self.value(a);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane, op) in v.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..h {
                for x in 0..w {
                    op[(y / k) * ow + x / k] += plane[y * w + x];
                }
            }
            op.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("avg_pool2d", vec![n, c, oh, ow], out, Op::AvgPool { a: a.0, k }, &[a.0])
    }

    pub(crate) fn avg_pool_backward(&mut self, a: usize, k: usize, g: &[T]) {
        let s = self.nodes[a].shape.clone();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let mut ga = vec![T::zero(); self.nodes[a].value.len()];
        for (plane, gp) in ga.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = gp[(y / k) * ow + x / k] * inv;
                }
            }
        }
        self.accumulate(a, ga);
    }

    /// NCHW -> NC mean over spatial positions.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw(a, "global_avg_pool")?;
        let inv = T::one() / T::lit((h * w) as f64);
        let out = self
            .value(a)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool { a: a.0 }, &[a.0])
    }

    pub(crate) fn global_avg_pool_backward(&mut self, a: usize, g: &[T]) {
        let s = self.nodes[a].shape.clone();
        let hw = s[2] * s[3];
        let inv = T::one() / T::lit(hw as f64);
        let mut ga = Vec::with_capacity(self.nodes[a].value.len());
        for &gv in g {
            ga.extend(std::iter::repeat_n(gv * inv, hw));
        }
        self.accumulate(a, ga);
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::Shape(format!(
                "cross_entropy expects [N, K] logits for {} labels, got {:?}",
                labels.len(),
                s
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid(format!("label {} out of range for {} classes", bad, k)));
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(v.len());
        let mut total = T::zero();
        for (row, &lab) in v.chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - mx).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total += z.ln() + mx - row[lab];
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let loss = total / T::lit(labels.len() as f64);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    /// Batch normalization over axis 1 of an NCHW (or NC) input.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<BnOutput, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::Shape(format!("batchnorm expects [N, C, ...], got {:?}", s)));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::Shape(format!(
                "batchnorm affine params {:?}/{:?} vs {} channels",
                self.shape(gamma),
                self.shape(beta),
                c
            )));
        }
        match mode {
            BnMode::Train => {
                let count = s[0] * s[2..].iter().product::<usize>();
                if count < 2 {
                    return Err(TensorError::ZeroVariance);
                }
                let mean = self.channel_mean(x, 1)?;
                let var = self.channel_var(x, mean, 1)?;
                let var_eps = self.add_scalar(var, eps)?;
                let std = self.sqrt(var_eps)?;
                let scale = self.div(gamma, std)?;
                let ms = self.mul(mean, scale)?;
                let shift = self.sub(beta, ms)?;
                let scaled = self.mul_channel(x, scale, 1)?;
                let out = self.add_channel(scaled, shift, 1)?;
                Ok(BnOutput {
                    out,
                    batch_mean: Some(mean),
                    batch_std: Some(std),
                })
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Shape(format!(
                        "running stats of length {}/{} vs {} channels",
                        mean.len(),
                        var.len(),
                        c
                    )));
                }
                let std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
                let std = self.leaf(super::Tensor::new(vec![c], std)?);
                let mean = self.leaf(super::Tensor::new(vec![c], mean.to_vec())?);
                let scale = self.div(gamma, std)?;
                let ms = self.mul(mean, scale)?;
                let shift = self.sub(beta, ms)?;
                let scaled = self.mul_channel(x, scale, 1)?;
                let out = self.add_channel(scaled, shift, 1)?;
                Ok(BnOutput {
                    out,
                    batch_mean: None,
                    batch_std: None,
                })
            }
        }
    }

    /// LSQ fake quantization `s * clamp(round(x / s), lo, hi)` with a scalar step `s`.
    ///
    /// The backward pass is the LSQ surrogate: `dx` passes where
    /// `lo <= x/s <= hi`, and `ds` is `round(x/s) - x/s` inside the range or
    /// the violated bound outside it, multiplied by `grad_scale`.
    pub fn lsq_quant(&mut self, x: Var, s: Var, lo: T, hi: T, grad_scale: T) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::Shape("lsq step size must be a scalar".into()));
        }
        let step = self.value(s)[0];
        if step <= T::zero() {
            return Err(TensorError::Invalid(format!("lsq step size must be positive, got {}", step)));
        }
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let q = v / step;
                let r = (q.abs() + half).floor() * q.signum();
                r.max(lo).min(hi) * step
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "lsq_quant",
            shape,
            out,
            Op::LsqQuant {
                x: x.0,
                s: s.0,
                lo,
                hi,
                grad_scale,
            },
            &[x.0, s.0],
        )
    }

    pub(crate) fn lsq_backward(&mut self, x: usize, s: usize, lo: T, hi: T, grad_scale: T, g: &[T]) {
        let step = self.nodes[s].value[0];
        let half = T::lit(0.5);
        let xv = &self.nodes[x].value;
        let mut gx = Vec::with_capacity(xv.len());
        let mut gs = T::zero();
        for (&v, &gi) in xv.iter().zip(g) {
            let q = v / step;
            if q < lo {
                gx.push(T::zero());
                gs += gi * lo;
            } else if q > hi {
                gx.push(T::zero());
                gs += gi * hi;
            } else {
                gx.push(gi);
                let r = (q.abs() + half).floor() * q.signum();
                gs += gi * (r - q);
            }
        }
        self.accumulate(x, gx);
        self.accumulate(s, vec![gs * grad_scale]);
    }
}
