//! Randomized quantization properties, run through proptest's runner so the
//! same suite serves the unit tests and the acceptance report.

use genie_core::quant::{quantize_uniform, soft_quant_weights, Bounds, WeightQuant};
use genie_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

#[derive(Debug, Clone)]
pub struct Case {
    pub bits: u32,
    pub step: f64,
    pub zero_point: i32,
    pub w: Vec<f64>,
    /// Integer offsets relative to `z` for lattice points.
    pub k: Vec<i32>,
    pub v: Vec<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (2u32..=8, 1e-3f64..2.0, 1usize..24).prop_flat_map(|(bits, step, len)| {
        let p = (1i32 << bits) - 1;
        (
            Just(bits),
            Just(step),
            0..=p,
            prop::collection::vec(-1.0f64..1.0, len),
            prop::collection::vec(0..=p, len),
            prop::collection::vec(prop_oneof![Just(-12.0f64), Just(12.0), -3.0f64..3.0], len),
        )
            .prop_map(move |(bits, step, z, u, k, v)| {
                let span = step * (p as f64 + 4.0);
                Case {
                    bits,
                    step,
                    zero_point: z,
                    w: u.iter().map(|x| x * span).collect(),
                    k,
                    v,
                }
            })
    })
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

/// `quantize(quantize(w)) == quantize(w)`, bit for bit.
pub fn idempotence(c: &Case) -> Result<(), TestCaseError> {
    let b = Bounds::asymmetric(c.bits).unwrap();
    let (i1, q1) = quantize_uniform(&c.w, c.step, c.zero_point, b).unwrap();
    let (i2, q2) = quantize_uniform(&q1, c.step, c.zero_point, b).unwrap();
    if i1 != i2 || q1 != q2 {
        return Err(fail(format!("not idempotent: {:?} vs {:?}", q1, q2)));
    }
    Ok(())
}

/// Values `s * (k - z)` with `k` in range come back unchanged.
pub fn lattice_fixed_points(c: &Case) -> Result<(), TestCaseError> {
    let b = Bounds::asymmetric(c.bits).unwrap();
    let w: Vec<f64> = c.k.iter().map(|&k| c.step * (k - c.zero_point) as f64).collect();
    let (ints, q) = quantize_uniform(&w, c.step, c.zero_point, b).unwrap();
    if ints != c.k || q != w {
        return Err(fail(format!("lattice points moved: {:?} -> {:?}", w, q)));
    }
    Ok(())
}

/// `|w - w_q| <= s/2` whenever `w` lies inside the representable range.
pub fn error_within_half_step(c: &Case) -> Result<(), TestCaseError> {
    let b = Bounds::asymmetric(c.bits).unwrap();
    let (_, q) = quantize_uniform(&c.w, c.step, c.zero_point, b).unwrap();
    let lo = c.step * (b.n - c.zero_point) as f64;
    let hi = c.step * (b.p - c.zero_point) as f64;
    for (&w, &wq) in c.w.iter().zip(&q) {
        let err = (w - wq).abs();
        if (lo..=hi).contains(&w) && err > c.step / 2.0 * (1.0 + 1e-12) {
            return Err(fail(format!("w {} -> {} exceeds half step {}", w, wq, c.step)));
        }
        if !(lo..=hi).contains(&wq) && wq.abs() > 0.0 {
            return Err(fail(format!("{} escaped [{}, {}]", wq, lo, hi)));
        }
    }
    Ok(())
}

fn soft_forward(w: &[f64], step: f64, z: i32, v: &[f64], b: Bounds) -> Vec<f64> {
    let n = w.len();
    let mut g = Graph::<f64>::new();
    let wv = g.constant(&Tensor::new(vec![1, n], w.to_vec()).unwrap());
    let sv = g.constant(&Tensor::scalar(step));
    let zv = g.constant(&Tensor::scalar(z as f64));
    let vv = g.constant(&Tensor::new(vec![1, n], v.to_vec()).unwrap());
    let y = soft_quant_weights(&mut g, wv, sv, zv, vv, b).unwrap();
    g.value(y).to_vec()
}

/// Soft weights with saturated `V` equal the hardened integers dequantized,
/// and with the nearest-rounding indicator they equal `quantize_uniform`.
pub fn soft_hard_consistency(c: &Case) -> Result<(), TestCaseError> {
    let b = Bounds::asymmetric(c.bits).unwrap();
    let n = c.w.len();
    let wq = WeightQuant {
        bits: c.bits,
        bounds: b,
        weight: Tensor::new(vec![1, n], c.w.clone()).unwrap(),
        bias: Tensor::zeros(&[1]),
        step: Tensor::scalar(c.step),
        zero_point: vec![c.zero_point],
        v: Tensor::new(vec![1, n], c.v.clone()).unwrap(),
        hard: None,
        fallback_channels: vec![],
    };
    let hardened = WeightQuant {
        hard: Some(wq.harden()),
        ..wq.clone()
    };
    let deq = hardened.dequantized().unwrap();
    for &i in hardened.hard.as_ref().unwrap() {
        if !(b.n..=b.p).contains(&i) {
            return Err(fail(format!("integer {} outside [{}, {}]", i, b.n, b.p)));
        }
    }
    // saturated logits give h in {0, 1} exactly
    let saturated: Vec<f64> = c.v.iter().map(|&v| if v.abs() >= 12.0 { v } else { 0.0 }).collect();
    let sat_idx: Vec<usize> = (0..n).filter(|&i| c.v[i].abs() >= 12.0).collect();
    let soft = soft_forward(&c.w, c.step, c.zero_point, &saturated, b);
    for &i in &sat_idx {
        if soft[i] != deq.data()[i] {
            return Err(fail(format!("soft {} vs hard {} at {}", soft[i], deq.data()[i], i)));
        }
    }
    // nearest rounding expressed as floor + indicator
    let nearest: Vec<f64> = c
        .w
        .iter()
        .map(|&w| {
            let r = w / c.step;
            if r - r.floor() >= 0.5 {
                12.0
            } else {
                -12.0
            }
        })
        .collect();
    let soft = soft_forward(&c.w, c.step, c.zero_point, &nearest, b);
    let (_, uq) = quantize_uniform(&c.w, c.step, c.zero_point, b).unwrap();
    for i in 0..n {
        let r = c.w[i] / c.step;
        // exact ties round differently under floor+indicator for negatives
        if (r - r.floor() - 0.5).abs() < 1e-9 {
            continue;
        }
        if soft[i] != uq[i] {
            return Err(fail(format!("nearest soft {} vs uniform {} at w={}", soft[i], uq[i], c.w[i])));
        }
    }
    Ok(())
}

pub type Property = fn(&Case) -> Result<(), TestCaseError>;

pub const PROPERTIES: &[(&str, Property)] = &[
    ("idempotence", idempotence),
    ("lattice_fixed_points", lattice_fixed_points),
    ("error_within_half_step", error_within_half_step),
    ("soft_hard_consistency", soft_hard_consistency),
];

/// Runs `prop` over `cases` random cases from a fixed seed.
pub fn run(prop: Property, cases: u32) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[7; 32]),
    );
    runner.run(&case(), |c| prop(&c)).map_err(|e| e.to_string())
}
