//! Uniform quantization primitives and step-size initializers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Stretch constants of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;

/// Step used when a tensor or channel carries no range at all.
pub const TINY_STEP: f64 = 1e-8;

/// Number of grid candidates in the step-size searches.
pub const GRID: usize = 100;

/// Integer clipping range `[n, p]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub n: i32,
    pub p: i32,
}

impl Bounds {
    /// `[0, 2^b - 1]`
    pub fn asymmetric(bits: u32) -> Result<Self, QuantError> {
        check_bits(bits)?;
        Ok(Self {
            n: 0,
            p: (1 << bits) - 1,
        })
    }

    /// `[-2^(b-1), 2^(b-1) - 1]`
    pub fn symmetric(bits: u32) -> Result<Self, QuantError> {
        check_bits(bits)?;
        Ok(Self {
            n: -(1 << (bits - 1)),
            p: (1 << (bits - 1)) - 1,
        })
    }

    pub fn lo<T: Scalar>(self) -> T {
        T::lit(self.n as f64)
    }

    pub fn hi<T: Scalar>(self) -> T {
        T::lit(self.p as f64)
    }
}

fn check_bits(bits: u32) -> Result<(), QuantError> {
    if !(2..=16).contains(&bits) {
        return Err(QuantError::Bits(bits));
    }
    Ok(())
}

/// Rounds half away from zero.
pub fn round_half_away<T: Scalar>(x: T) -> T {
    x.round()
}

/// Min-Max step and zero point for an asymmetric `bits`-bit grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub step: f64,
    pub zero_point: i32,
    /// The tensor was constant and the fallback step was used.
    pub fallback: bool,
}

/// `s = (max - min) / (2^b - 1)`, `z = -round(min / s)`, with the range
/// widened to contain zero so `z` lies in `[0, 2^b - 1]`.
///
/// A constant tensor falls back to `s = max|w| * 2^(1-b)` (or
/// [`TINY_STEP`] if it is all zeros) with `z` at the grid midpoint.
pub fn minmax_step<T: Scalar>(w: &[T], bits: u32) -> Result<MinMax, QuantError> {
    let bounds = Bounds::asymmetric(bits)?;
    let (lo, hi) = finite_range(w)?;
    if hi <= lo {
        let m = lo.abs();
        let step = if m > 0.0 { m * 2f64.powi(1 - bits as i32) } else { TINY_STEP };
        return Ok(MinMax {
            step,
            zero_point: 1 << (bits - 1),
            fallback: true,
        });
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let step = (hi - lo) / bounds.p as f64;
    let zero_point = (-(lo / step).round()).clamp(bounds.n as f64, bounds.p as f64) as i32;
    Ok(MinMax {
        step,
        zero_point,
        fallback: false,
    })
}

fn finite_range<T: Scalar>(w: &[T]) -> Result<(f64, f64), QuantError> {
    if w.is_empty() {
        return Err(QuantError::Invalid("empty tensor".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in w {
        let v = v.as_f64();
        if !v.is_finite() {
            return Err(QuantError::NonFinite);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// `w_int = clip(round(w / s) + z, n, p)` and `w_q = s * (w_int - z)`.
pub fn quantize_uniform<T: Scalar>(w: &[T], s: T, z: i32, bounds: Bounds) -> Result<(Vec<i32>, Vec<T>), QuantError> {
    if !(s > T::zero()) {
        return Err(QuantError::Invalid(format!("step size must be positive, got {}", s)));
    }
    let mut ints = Vec::with_capacity(w.len());
    let mut deq = Vec::with_capacity(w.len());
    let zt = T::lit(z as f64);
    for &v in w {
        if !v.is_finite() {
            return Err(QuantError::NonFinite);
        }
        let q = (round_half_away(v / s) + zt).max(bounds.lo()).min(bounds.hi());
        ints.push(q.to_i32().expect("clipped to the integer range"));
        deq.push(s * (q - zt));
    }
    Ok((ints, deq))
}

/// Step of one channel from the p-norm search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStep {
    pub step: f64,
    pub zero_point: i32,
    pub fallback: bool,
}

/// `sum |w - s (clip(round(w/s) + z, n, p) - z)|^p_ord` with
/// `z = clamp(-round(min/s), n, p)` and the range widened to contain zero.
pub fn pnorm_error(w: &[f64], step: f64, bounds: Bounds, p_ord: f64) -> (f64, i32) {
    let lo = w.iter().copied().fold(0.0f64, f64::min);
    let z = (-(lo / step).round()).clamp(bounds.n as f64, bounds.p as f64);
    let err = w
        .iter()
        .map(|&v| {
            let q = ((v / step).round() + z).clamp(bounds.n as f64, bounds.p as f64);
            (v - step * (q - z)).abs().powf(p_ord)
        })
        .sum();
    (err, z as i32)
}

/// Per-channel step sizes minimizing the `p_ord`-norm reconstruction error
/// over the grid `s_max * k / 100`, `k = 1..=100`, where `s_max` is the
/// channel's Min-Max step. Ties go to the smaller step.
///
/// `w` is laid out with the output channel as the leading axis.
pub fn init_step_pnorm<T: Scalar>(w: &Tensor<T>, bits: u32, p_ord: f64) -> Result<Vec<ChannelStep>, QuantError> {
    let bounds = Bounds::asymmetric(bits)?;
    if !(p_ord > 0.0) {
        return Err(QuantError::Invalid(format!("norm order must be positive, got {}", p_ord)));
    }
    let channels = *w.shape().first().ok_or_else(|| QuantError::Invalid("scalar weight".into()))?;
    let per = w.numel() / channels.max(1);
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let vals: Vec<f64> = w.data()[c * per..(c + 1) * per].iter().map(|v| v.as_f64()).collect();
        let mm = minmax_step(&w.data()[c * per..(c + 1) * per], bits)?;
        if mm.fallback {
            out.push(ChannelStep {
                step: mm.step,
                zero_point: mm.zero_point,
                fallback: true,
            });
            continue;
        }
        let mut best = (f64::INFINITY, 0.0, 0);
        for k in 1..=GRID {
            let s = mm.step * k as f64 / GRID as f64;
            let (err, z) = pnorm_error(&vals, s, bounds, p_ord);
            if err < best.0 {
                best = (err, s, z);
            }
        }
        out.push(ChannelStep {
            step: best.1,
            zero_point: best.2,
            fallback: false,
        });
    }
    Ok(out)
}

/// Per-tensor symmetric activation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActStep {
    pub step: f64,
    pub fallback: bool,
}

/// Mean squared error of symmetric quantization of `x` with step `s`.
pub fn symmetric_mse(x: &[f64], s: f64, bounds: Bounds) -> f64 {
    let sum: f64 = x
        .iter()
        .map(|&v| {
            let q = s * (v / s).round().clamp(bounds.n as f64, bounds.p as f64);
            (v - q) * (v - q)
        })
        .sum();
    sum / x.len() as f64
}

/// Activation step from a batch: grid search over `s_max * k / 100` with
/// `s_max = max|x| / p`, minimizing MSE. Ties go to the smaller step.
pub fn init_act_step<T: Scalar>(x: &[T], bits: u32) -> Result<ActStep, QuantError> {
    let bounds = Bounds::symmetric(bits)?;
    let (lo, hi) = finite_range(x)?;
    let m = lo.abs().max(hi.abs());
    if m == 0.0 {
        return Ok(ActStep {
            step: TINY_STEP,
            fallback: true,
        });
    }
    let vals: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let s_max = m / bounds.p as f64;
    let mut best = (f64::INFINITY, s_max);
    for k in 1..=GRID {
        let s = s_max * k as f64 / GRID as f64;
        let err = symmetric_mse(&vals, s, bounds);
        if err < best.0 {
            best = (err, s);
        }
    }
    Ok(ActStep {
        step: best.1,
        fallback: false,
    })
}

/// `clamp(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)`
pub fn rectified_sigmoid(v: f64) -> f64 {
    (sigmoid(v) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`rectified_sigmoid`] on the open interval `(0, 1)`.
pub fn rectified_sigmoid_inverse(h: f64) -> f64 {
    let s = (h - GAMMA) / (ZETA - GAMMA);
    (s / (1.0 - s)).ln()
}

/// Rectified sigmoid on the graph.
pub fn rectified_sigmoid_var<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var, TensorError> {
    let s = g.sigmoid(v)?;
    let s = g.mul_scalar(s, T::lit(ZETA - GAMMA))?;
    let s = g.add_scalar(s, T::lit(GAMMA))?;
    g.clamp(s, T::zero(), T::one())
}

/// Soft-rounded weights `s * (clip(floor(W/s) + h(V) + z, n, p) - z)`, with
/// per-output-channel `s` and `z` (axis 0). The floor is straight-through, so
/// both `s` and `V` receive gradient.
pub fn soft_quant_weights<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    s: Var,
    z: Var,
    v: Var,
    bounds: Bounds,
) -> Result<Var, TensorError> {
    if g.shape(w) != g.shape(v) {
        return Err(TensorError::Shape(format!(
            "rounding variables {:?} vs weights {:?}",
            g.shape(v),
            g.shape(w)
        )));
    }
    let ratio = g.div_channel(w, s, 0)?;
    let fl = g.floor_ste(ratio)?;
    let h = rectified_sigmoid_var(g, v)?;
    let q = g.add(fl, h)?;
    let q = g.add_channel(q, z, 0)?;
    let q = g.clamp(q, bounds.lo(), bounds.hi())?;
    let q = g.sub_channel(q, z, 0)?;
    g.mul_channel(q, s, 0)
}

/// `sum (1 - |2 h(V) - 1|^beta)`
pub fn rounding_reg<T: Scalar>(g: &mut Graph<T>, v: Var, beta: f64) -> Result<Var, TensorError> {
    if !(beta > 0.0) {
        return Err(TensorError::Invalid(format!("beta must be positive, got {}", beta)));
    }
    let h = rectified_sigmoid_var(g, v)?;
    let d = g.mul_scalar(h, T::lit(2.0))?;
    let d = g.add_scalar(d, -T::one())?;
    let d = g.abs(d)?;
    let d = g.pow(d, T::lit(beta))?;
    let d = g.neg(d)?;
    let d = g.add_scalar(d, T::one())?;
    g.sum(d)
}

/// Annealing of the rounding regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub warmup_frac: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            start: 20.0,
            end: 2.0,
            warmup_frac: 0.2,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(self.start > self.end && self.end > 0.0 && (0.0..1.0).contains(&self.warmup_frac)) {
            return Err(QuantError::Invalid(format!("invalid beta schedule {:?}", self)));
        }
        Ok(())
    }

    /// `(beta, regularizer_active)` at `step` of `total`. The regularizer is
    /// off for the first `warmup_frac` of the steps; beta then falls linearly
    /// from `start` to `end`, reaching `end` at the last step.
    pub fn at(&self, step: usize, total: usize) -> (f64, bool) {
        let warmup = (self.warmup_frac * total as f64).floor() as usize;
        if step < warmup {
            return (self.start, false);
        }
        let span = total.saturating_sub(1).saturating_sub(warmup);
        if span == 0 {
            return (self.end, true);
        }
        let rel = ((step - warmup) as f64 / span as f64).min(1.0);
        (self.end + (self.start - self.end) * (1.0 - rel), true)
    }
}

/// `s * clip(round(x/s), n, p)` with the LSQ gradient scale
/// `1 / sqrt(numel * p)`.
pub fn lsq_fake_quant<T: Scalar>(g: &mut Graph<T>, x: Var, s: Var, bounds: Bounds) -> Result<Var, TensorError> {
    let numel = g.value(x).len();
    let grad_scale = T::lit(1.0 / ((numel as f64) * bounds.p as f64).sqrt());
    g.lsq_quant(x, s, bounds.lo(), bounds.hi(), grad_scale)
}

/// LSQ activation quantization with QDrop: each element keeps its
/// full-precision value with probability `drop_prob`.
pub fn lsq_act_quant<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    s: Var,
    bounds: Bounds,
    drop_prob: f64,
    rng: &mut R,
) -> Result<Var, TensorError> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(TensorError::Invalid(format!("drop probability {} outside [0, 1]", drop_prob)));
    }
    if drop_prob >= 1.0 {
        return Ok(x);
    }
    let q = lsq_fake_quant(g, x, s, bounds)?;
    if drop_prob <= 0.0 {
        return Ok(q);
    }
    let shape = g.shape(x).to_vec();
    let keep = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < drop_prob { T::zero() } else { T::one() });
    let drop = keep.map(|k| T::one() - k);
    let keep = g.constant(&keep);
    let drop = g.constant(&drop);
    let a = g.mul(q, keep)?;
    let b = g.mul(x, drop)?;
    g.add(a, b)
}
