//! Swing convolution checks: identity offset, shape invariance, uniformity.

use genie_core::distill::{swing_conv2d_at, SwingConfig};
use genie_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Offset `(0, 0)` reproduces the plain strided conv bit for bit.
pub fn zero_offset_matches_plain(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..instances {
        let stride = rng.random_range(2..4usize);
        let k = rng.random_range(1..4usize);
        let pad = rng.random_range(0..2usize);
        let h = rng.random_range(stride + k..12);
        let x = Tensor::<f32>::randn(&[2, 3, h, h + 1], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[4, 3, k, k], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let wv = g.constant(&w);
        let plain = g.conv2d(xv, wv, None, stride, pad).map_err(|e| e.to_string())?;
        let swing = swing_conv2d_at(&mut g, xv, wv, None, stride, pad, (0, 0)).map_err(|e| e.to_string())?;
        if g.value(plain) != g.value(swing) || g.shape(plain) != g.shape(swing) {
            return Err(format!("instance {} differs", i));
        }
    }
    Ok(())
}

/// Every offset yields the plain conv's output shape.
pub fn shapes_invariant(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..instances {
        let stride = rng.random_range(2..5usize);
        let k = rng.random_range(1..4usize);
        let pad = rng.random_range(0..2usize);
        let h = rng.random_range(stride + k..14);
        let wd = rng.random_range(stride + k..14);
        let x = Tensor::<f32>::randn(&[1, 2, h, wd], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[3, 2, k, k], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let wv = g.constant(&w);
        let plain = g.conv2d(xv, wv, None, stride, pad).map_err(|e| e.to_string())?;
        let want = g.shape(plain).to_vec();
        for dy in 0..stride {
            for dx in 0..stride {
                let y = swing_conv2d_at(&mut g, xv, wv, None, stride, pad, (dy, dx)).map_err(|e| e.to_string())?;
                if g.shape(y) != want.as_slice() {
                    return Err(format!("offset ({}, {}) gave {:?}, want {:?}", dy, dx, g.shape(y), want));
                }
            }
        }
    }
    Ok(())
}

/// Pearson chi-square p-value of `draws` offsets at `stride` against the
/// uniform distribution over all `stride^2` cells.
pub fn offset_uniformity_p(seed: u64, stride: usize, draws: usize) -> f64 {
    let mut cfg = SwingConfig::new(seed);
    let cells = stride * stride;
    let mut counts = vec![0usize; cells];
    for _ in 0..draws {
        let (dy, dx) = cfg.sample_offset(stride);
        counts[dy * stride + dx] += 1;
    }
    let expected = draws as f64 / cells as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((cells - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}
