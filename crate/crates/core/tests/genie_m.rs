use genie_core::nn::{ArchConfig, ModelGraph};
use genie_core::quant::{
    init_act_step, init_step_pnorm, quantize_model, rectified_sigmoid, rounding_reg, BetaSchedule, Bounds,
    QuantMode, QuantPolicy, QuantizedModel, ReconConfig,
};
use genie_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force p-norm step search written from the definition: every grid
/// step, every zero point candidate derived from the widened minimum.
fn pnorm_oracle(w: &[f64], bits: u32, p_ord: f64) -> (f64, i32) {
    let top = (1i64 << bits) as f64 - 1.0;
    let lo = w.iter().cloned().fold(0.0, f64::min);
    let hi = w.iter().cloned().fold(0.0, f64::max);
    let s_max = (hi - lo) / top;
    let mut best = (f64::INFINITY, 0.0, 0);
    for k in 1..=100 {
        let s = s_max * k as f64 / 100.0;
        let z = (-(lo / s)).round().max(0.0).min(top);
        let mut err = 0.0;
        for &v in w {
            let q = ((v / s).round() + z).max(0.0).min(top);
            err += (v - s * (q - z)).abs().powf(p_ord);
        }
        if err < best.0 {
            best = (err, s, z as i32);
        }
    }
    (best.1, best.2)
}

fn act_oracle(x: &[f64], bits: u32) -> f64 {
    let p = ((1i64 << (bits - 1)) - 1) as f64;
    let s_max = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) / p;
    let mut best = (f64::INFINITY, 0.0);
    for k in 1..=100 {
        let s = s_max * k as f64 / 100.0;
        let err: f64 = x
            .iter()
            .map(|&v| (v - s * (v / s).round().clamp(-p - 1.0, p)).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        if err < best.0 {
            best = (err, s);
        }
    }
    best.1
}

#[test]
fn pnorm_step_search_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(bits, p_ord) in &[(2, 2.0), (4, 1.0), (4, 2.0), (4, 2.4), (4, 3.0), (8, 2.0)] {
        let w = Tensor::<f64>::from_fn(&[6, 27], |_| rng.random_range(-0.7..0.4) * rng.random_range(0.1..2.0));
        let got = init_step_pnorm(&w, bits, p_ord).unwrap();
        for (c, cs) in got.iter().enumerate() {
            let (s, z) = pnorm_oracle(&w.data()[c * 27..(c + 1) * 27], bits, p_ord);
            assert!(!cs.fallback);
            assert!((cs.step - s).abs() <= 1e-15 * s, "bits {bits} p {p_ord} channel {c}: {} vs {s}", cs.step);
            assert_eq!(cs.zero_point, z);
        }
    }
}

#[test]
fn pnorm_search_never_beats_minmax_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Tensor::<f64>::from_fn(&[4, 50], |_| rng.random_range(-1.0..1.0));
    for p_ord in [1.0, 2.0, 2.4, 3.0] {
        for (c, cs) in init_step_pnorm(&w, 4, p_ord).unwrap().iter().enumerate() {
            let ch = &w.data()[c * 50..(c + 1) * 50];
            let range = ch.iter().cloned().fold(0.0, f64::max) - ch.iter().cloned().fold(0.0, f64::min);
            assert!(cs.step <= range / 15.0 * (1.0 + 1e-12));
            assert!((0..=15).contains(&cs.zero_point));
        }
    }
}

#[test]
fn constant_channel_falls_back() {
    let w = Tensor::<f64>::new(vec![2, 3], vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
    let got = init_step_pnorm(&w, 4, 2.0).unwrap();
    assert!(got.iter().all(|c| c.fallback && c.step > 0.0));
}

#[test]
fn activation_step_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for bits in [2, 4, 8] {
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(0.0f64..1.0).powi(3) * 4.0 - 0.3).collect();
        let got = init_act_step(&x, bits).unwrap();
        let want = act_oracle(&x, bits);
        assert!(!got.fallback);
        assert!((got.step - want).abs() <= 1e-15 * want, "{} vs {want}", got.step);
        let p = ((1 << (bits - 1)) - 1) as f64;
        assert!(got.step <= 4.0 / p);
    }
    let zeros = init_act_step(&[0.0f64; 8], 4).unwrap();
    assert!(zeros.fallback && zeros.step > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rounding_reg_is_bounded(v in prop::collection::vec(-8.0f64..8.0, 1..40), beta in 1.0f64..20.0) {
        let mut g = Graph::new();
        let n = v.len();
        let vv = g.constant(&Tensor::new(vec![n], v.clone()).unwrap());
        let r = rounding_reg(&mut g, vv, beta).unwrap();
        let r = g.scalar_value(r);
        prop_assert!(r >= -1e-12 && r <= n as f64 + 1e-12);
        let expected: f64 = v.iter().map(|&x| 1.0 - (2.0 * rectified_sigmoid(x) - 1.0).abs().powf(beta)).sum();
        prop_assert!((r - expected).abs() <= 1e-12 * n as f64);
    }
}

#[test]
fn rounding_reg_extremes() {
    let mut g = Graph::<f64>::new();
    let sat = g.constant(&Tensor::new(vec![4], vec![-9.0, 9.0, 12.0, -30.0]).unwrap());
    let mid = g.constant(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let a = rounding_reg(&mut g, sat, 2.0).unwrap();
    let b = rounding_reg(&mut g, mid, 2.0).unwrap();
    assert_eq!(g.scalar_value(a), 0.0);
    // h(0) = 0.5 exactly
    assert!((g.scalar_value(b) - 3.0).abs() < 1e-15);
}

#[test]
fn beta_schedule_warms_up_then_anneals() {
    let s = BetaSchedule::default();
    let total = 100;
    for step in 0..20 {
        assert!(!s.at(step, total).1);
    }
    assert_eq!(s.at(20, total), (20.0, true));
    assert_eq!(s.at(99, total), (2.0, true));
    let mut prev = f64::INFINITY;
    for step in 20..100 {
        let (b, on) = s.at(step, total);
        assert!(on && b < prev && (2.0..=20.0).contains(&b));
        prev = b;
    }
}

fn teacher() -> ModelGraph<f32> {
    ModelGraph::build(&ArchConfig::builtin("plain-cnn-6").unwrap()).unwrap()
}

fn calib(n: usize) -> Tensor<f32> {
    Tensor::randn(&[n, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(17))
}

fn short(steps: usize) -> ReconConfig {
    ReconConfig {
        steps,
        batch_size: 8,
        lr_v: 1e-2,
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_parameters_at_their_initial_values() {
    let t = teacher();
    let cfg = short(0);
    let init = QuantizedModel::prepare(&t, 4, 4, QuantPolicy::FirstLast8Bit, 2.0).unwrap();
    let (qm, reports) = quantize_model(&t, &calib(16), &cfg).unwrap();
    for (name, q) in &qm.weights {
        assert_eq!(q.v, init.weights[name].v);
        assert_eq!(q.step, init.weights[name].step);
    }
    assert!(qm.acts.values().all(|a| a.step.is_some()));
    assert!(reports.iter().all(|r| r.losses.is_empty() && r.initial_mse == r.final_mse && !r.reverted));
}

#[test]
fn lambda_only_matters_once_the_regularizer_is_active() {
    let t = teacher();
    let x = calib(16);
    let (_, with) = quantize_model(&t, &x, &short(10)).unwrap();
    let (_, without) = quantize_model(&t, &x, &ReconConfig { lambda: 0.0, ..short(10) }).unwrap();
    // two warmup steps out of ten, then the runs part ways
    assert_eq!(with[0].losses[..2], without[0].losses[..2]);
    assert!(with[0].losses[2] > without[0].losses[2]);
}

#[test]
fn step_sizes_train_only_when_enabled() {
    let t = teacher();
    let x = calib(16);
    let init = QuantizedModel::prepare(&t, 4, 4, QuantPolicy::FirstLast8Bit, 2.0).unwrap();
    let (joint, reports) = quantize_model(&t, &x, &short(5)).unwrap();
    let (frozen, _) = quantize_model(&t, &x, &ReconConfig { learn_step: false, ..short(5) }).unwrap();
    for name in init.weights.keys() {
        assert_eq!(frozen.weights[name].step, init.weights[name].step, "{name}");
    }
    let mut checked = 0;
    for r in reports.iter().filter(|r| !r.reverted) {
        for name in joint.block_quantizers(r.block).unwrap().0 {
            let q = &init.weights[&name];
            assert_ne!(joint.weights[&name].step, q.step, "{name}");
            assert_ne!(joint.weights[&name].v, q.v, "{name}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn reconstruction_lowers_every_block_error() {
    let t = teacher();
    let (_, reports) = quantize_model(&t, &calib(32), &short(150)).unwrap();
    for r in &reports {
        if r.reverted {
            assert_eq!(r.final_mse, r.initial_mse, "block {}", r.block);
        } else {
            assert!(r.final_mse < r.initial_mse, "block {}: {} -> {}", r.block, r.initial_mse, r.final_mse);
        }
    }
    assert!(reports.iter().filter(|r| !r.reverted).count() >= reports.len() / 2);
}

#[test]
fn quantization_is_deterministic() {
    let t = teacher();
    let x = calib(16);
    let a = quantize_model(&t, &x, &short(4)).unwrap();
    let b = quantize_model(&t, &x, &short(4)).unwrap();
    assert_eq!(a, b);
    let c = quantize_model(&t, &x, &ReconConfig { seed: 1, ..short(4) }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn finalize_on_saturated_rounding_is_exact() {
    let t = teacher();
    let mut qm = QuantizedModel::prepare(&t, 4, 4, QuantPolicy::FirstLast8Bit, 2.0).unwrap();
    let x = calib(8);
    // initialize activation steps without training
    let (init, _) = quantize_model(&t, &x, &short(0)).unwrap();
    qm.acts = init.acts;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for q in qm.weights.values_mut() {
        q.v.data_mut().iter_mut().for_each(|v| *v = if rng.random::<bool>() { 12.0 } else { -12.0 });
    }
    let hard = qm.finalize();
    assert_eq!(qm.predict(&x, QuantMode::Soft).unwrap(), hard.predict(&x, QuantMode::Hard).unwrap());
    for q in hard.weights.values() {
        let ints = q.hard.as_ref().unwrap();
        let Bounds { n, p } = q.bounds;
        assert!(ints.iter().all(|&i| (n..=p).contains(&i)));
        let per = q.weight.numel() / q.weight.shape()[0];
        let deq = q.dequantized().unwrap();
        for (i, (&k, &d)) in ints.iter().zip(deq.data()).enumerate() {
            let c = i / per;
            assert_eq!(d, q.step.data()[c] * (k as f32 - q.zero_point[c] as f32));
        }
    }
}

#[test]
fn reverted_blocks_agree_soft_and_hard() {
    let t = teacher();
    let x = calib(16);
    let (qm, reports) = quantize_model(&t, &x, &short(6)).unwrap();
    let hard = qm.finalize();
    for r in reports.iter().filter(|r| r.reverted) {
        let (wn, _) = qm.block_quantizers(r.block).unwrap();
        for name in wn {
            assert!(qm.weights[&name].h_values().all(|h| h == 0.0 || h == 1.0));
            assert_eq!(qm.weights[&name].harden(), hard.weights[&name].hard.clone().unwrap());
        }
    }
}

#[test]
fn hard_predictions_require_finalize() {
    let t = teacher();
    let (qm, _) = quantize_model(&t, &calib(8), &short(0)).unwrap();
    assert!(qm.predict(&calib(2), QuantMode::Hard).is_err());
}
