//! Swing convolution: strided convolution over a randomly shifted view of
//! the reflection-padded input, so every spatial phase receives gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DistillError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, Var};

/// Offset source for swing convolutions; one draw per strided conv call.
#[derive(Debug, Clone)]
pub struct SwingConfig {
    pub enabled: bool,
    rng: ChaCha8Rng,
    forced: Option<(usize, usize)>,
}

impl SwingConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            forced: None,
        }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        Self {
            enabled: true,
            rng,
            forced: None,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            forced: None,
        }
    }

    /// Always uses the given offset (clamped to `stride - 1`), for testing.
    pub fn forced(offset: (usize, usize)) -> Self {
        Self {
            enabled: true,
            rng: ChaCha8Rng::seed_from_u64(0),
            forced: Some(offset),
        }
    }

    /// Uniform draw from `{0..stride-1}^2`.
    pub fn sample_offset(&mut self, stride: usize) -> (usize, usize) {
        if let Some((dy, dx)) = self.forced {
            return (dy.min(stride - 1), dx.min(stride - 1));
        }
        let dy = self.rng.random_range(0..stride);
        let dx = self.rng.random_range(0..stride);
        (dy, dx)
    }
}

/// Swing convolution with an explicit offset `(dy, dx)`.
///
/// The input is reflection-padded by `stride - 1` on the right and bottom, the
/// original-sized window at `(dy, dx)` is cropped, and the crop goes through
/// the ordinary stride-`stride` convolution with zero padding `pad`.
#[allow(clippy::too_many_arguments)]
pub fn swing_conv2d_at<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    offset: (usize, usize),
) -> Result<Var, DistillError> {
    if stride < 2 {
        return Err(DistillError::Invalid(
            "swing convolution needs stride > 1; use a plain conv".into(),
        ));
    }
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::Shape(format!("swing conv expects NCHW, got {:?}", shape)).into());
    }
    let (h, wd) = (shape[2], shape[3]);
    if h <= stride - 1 || wd <= stride - 1 {
        return Err(DistillError::Invalid(format!(
            "input {}x{} too small for swing stride {}",
            h, wd, stride
        )));
    }
    let (dy, dx) = offset;
    if dy >= stride || dx >= stride {
        return Err(DistillError::Invalid(format!("offset {:?} outside stride {}", offset, stride)));
    }
    let padded = g.reflection_pad2d(x, (0, stride - 1, 0, stride - 1))?;
    let cropped = g.crop2d(padded, dy, dx, h, wd)?;
    Ok(g.conv2d(cropped, w, b, stride, pad)?)
}

/// Swing convolution drawing its offset from `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn swing_conv2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    cfg: &mut SwingConfig,
) -> Result<Var, DistillError> {
    let offset = cfg.sample_offset(stride.max(1));
    swing_conv2d_at(g, x, w, b, stride, pad, offset)
}
