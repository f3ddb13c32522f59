//! Labeled image sets: the built-in synthetic pattern set and IDX ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T> {
    /// `[N, C, H, W]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Reads an MNIST-style IDX image/label pair (`u8` pixels scaled to
    /// `[0, 1]` then standardized with mean 0.5, std 0.25).
    pub fn from_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Self, ModelError> {
        let img = std::fs::read(images).map_err(|e| ModelError::Dataset(e.to_string()))?;
        let lab = std::fs::read(labels).map_err(|e| ModelError::Dataset(e.to_string()))?;
        let (idims, ipix) = parse_idx(&img)?;
        let (ldims, lvals) = parse_idx(&lab)?;
        if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
            return Err(ModelError::Dataset(format!(
                "IDX dims {:?} / {:?} do not describe an image set",
                idims, ldims
            )));
        }
        let labels: Vec<usize> = lvals.iter().map(|&v| v as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::Dataset(format!("label {} >= {} classes", bad, num_classes)));
        }
        let data = ipix.iter().map(|&p| T::lit((p as f64 / 255.0 - 0.5) / 0.25)).collect();
        let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }
}

fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8]), ModelError> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(ModelError::Dataset("not an unsigned-byte IDX file".into()));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(ModelError::Dataset("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() < header + count {
        return Err(ModelError::Dataset("truncated IDX payload".into()));
    }
    Ok((dims, &bytes[header..header + count]))
}

pub const DESK_CLASSES: usize = 10;
pub const DESK_SIZE: usize = 32;

/// Pixel noise standard deviation in `[0, 1]` intensity units.
const DESK_NOISE: f64 = 0.22;

/// Pattern mask in `[0, 1]` for class `label` at pixel `(y, x)`.
struct Pattern {
    label: usize,
    period: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    size: f64,
    width: f64,
}

impl Pattern {
    fn sample(label: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = DESK_SIZE as f64;
        Self {
            label,
            period: rng.random_range(5.0..11.0),
            phase: rng.random_range(0.0..2.0 * PI),
            cx: rng.random_range(0.3 * s..0.7 * s),
            cy: rng.random_range(0.3 * s..0.7 * s),
            size: rng.random_range(5.0..10.0),
            width: rng.random_range(1.5..3.0),
        }
    }

    fn mask(&self, y: f64, x: f64) -> f64 {
        let stripe = |t: f64| ((2.0 * PI * t / self.period + self.phase).sin() > 0.0) as u8 as f64;
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = (dx * dx + dy * dy).sqrt();
        let on = |b: bool| b as u8 as f64;
        match self.label {
            0 => stripe(y),
            1 => stripe(x),
            2 => stripe((x + y) / std::f64::consts::SQRT_2),
            3 => stripe((x - y) / std::f64::consts::SQRT_2),
            4 => {
                let p = self.period * 0.6;
                let off = self.phase;
                on(((((x + off) / p).floor() + ((y + off) / p).floor()) as i64).rem_euclid(2) == 0)
            }
            5 => on(r < self.size),
            6 => on(dx.abs() < self.size * 0.85 && dy.abs() < self.size * 0.85),
            7 => on((r - self.size).abs() < self.width),
            8 => on(dx.abs() < self.width || dy.abs() < self.width) * on(dx.abs() < 1.3 * self.size && dy.abs() < 1.3 * self.size),
            _ => {
                // upward triangle
                let top = self.cy - self.size;
                let bottom = self.cy + self.size;
                on(y > top && y < bottom && dx.abs() < (y - top) * 0.6)
            }
        }
    }
}

/// Deterministic synthetic 10-class `3 x 32 x 32` set of colored geometric
/// patterns (stripes in four orientations, checkerboard, disk, square,
/// ring, cross, triangle) with random colors, placement and pixel noise.
/// Labels cycle through the classes so every prefix is balanced.
pub fn desk_dataset<T: Scalar>(n: usize, seed: u64) -> LabeledImages<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = DESK_SIZE * DESK_SIZE;
    let mut data = Vec::with_capacity(n * 3 * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % DESK_CLASSES;
        let pat = Pattern::sample(label, &mut rng);
        let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let mut bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        // keep a minimum contrast between foreground and background
        let contrast: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if contrast < 0.25 {
            for (b, f) in bg.iter_mut().zip(&fg) {
                *b = if *f > 0.5 { *f - 0.5 } else { *f + 0.5 };
            }
        }
        let mask: Vec<f64> = (0..hw)
            .map(|p| pat.mask((p / DESK_SIZE) as f64 + 0.5, (p % DESK_SIZE) as f64 + 0.5))
            .collect();
        for ch in 0..3 {
            for &m in &mask {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = bg[ch] + m * (fg[ch] - bg[ch]) + DESK_NOISE * noise;
                data.push(T::lit((v - 0.5) / 0.25));
            }
        }
        labels.push(label);
    }
    LabeledImages {
        images: Tensor::new(vec![n, 3, DESK_SIZE, DESK_SIZE], data).expect("sized above"),
        labels,
        num_classes: DESK_CLASSES,
    }
}

/// Seed offsets keep the train and test splits disjoint streams.
pub fn desk_split<T: Scalar>(train: usize, test: usize, seed: u64) -> (LabeledImages<T>, LabeledImages<T>) {
    (desk_dataset(train, seed), desk_dataset(test, seed ^ 0x7e57_7e57_7e57_7e57))
}
