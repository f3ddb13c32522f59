//! Central finite-difference gradient oracle and the per-op instance suite.

use genie_core::distill::swing_conv2d_at;
use genie_core::quant::primitives::{rectified_sigmoid_var, rounding_reg, soft_quant_weights, Bounds};
use genie_core::tensor::{BnMode, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

const H: f64 = 1e-6;

fn projection(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0))
}

fn eval(f: &Build, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let y = f(&mut g, &vs).expect("forward");
    g.value(y).iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error `|a - n| / max(|a|, |n|)` (norm-wise per input)
/// between the autodiff gradient of `<f(inputs), r>` for a fixed random `r`
/// and its central-difference estimate. Only inputs in `wrt` are checked.
pub fn rel_error(f: &Build, inputs: &[Tensor<f64>], wrt: &[usize], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if wrt.contains(&i) { g.param(t) } else { g.constant(t) })
        .collect();
    let y = f(&mut g, &vs).expect("forward");
    let proj = projection(g.value(y).len(), seed);
    let shape = g.shape(y).to_vec();
    let p = g.constant(&proj.clone().reshape(&shape).unwrap());
    let prod = g.mul(y, p).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for &i in wrt {
        let analytic = g.grad(vs[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (eval(f, &plus, &proj) - eval(f, &minus, &proj)) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Uniform values in `[-r, r]` kept at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], r: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(-r..r);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub struct OpCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Instance = (Box<Build>, Vec<Tensor<f64>>, Vec<usize>);

/// Builds one random instance of op `name`.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..4usize);
    let c = rng.random_range(1..4usize);
    let hw = rng.random_range(3..6usize);
    let x4 = |rng: &mut ChaCha8Rng| away_from(rng, &[n, c, hw, hw], 2.0, &[], 0.0);
    let vec_c = |rng: &mut ChaCha8Rng| away_from(rng, &[c], 1.5, &[], 0.0);
    match name {
        "add" | "sub" | "mul" => {
            let a = x4(rng);
            let b = x4(rng);
            let op = name.to_string();
            let f: Box<Build> = Box::new(move |g, v| match op.as_str() {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            });
            (f, vec![a, b], vec![0, 1])
        }
        "div" => {
            let a = x4(rng);
            let b = away_from(rng, &[n, c, hw, hw], 2.0, &[0.0], 0.4);
            (Box::new(|g, v| g.div(v[0], v[1])), vec![a, b], vec![0, 1])
        }
        "scalar_broadcast" => {
            let a = x4(rng);
            let b = away_from(rng, &[1], 2.0, &[0.0], 0.4);
            (
                Box::new(|g, v| {
                    let m = g.mul(v[0], v[1])?;
                    let d = g.div(m, v[1])?;
                    let d = g.add(d, v[1])?;
                    g.mul(d, v[1])
                }),
                vec![a, b],
                vec![0, 1],
            )
        }
        "add_channel" | "sub_channel" | "mul_channel" => {
            let a = x4(rng);
            let b = vec_c(rng);
            let op = name.to_string();
            let f: Box<Build> = Box::new(move |g, v| match op.as_str() {
                "add_channel" => g.add_channel(v[0], v[1], 1),
                "sub_channel" => g.sub_channel(v[0], v[1], 1),
                _ => g.mul_channel(v[0], v[1], 1),
            });
            (f, vec![a, b], vec![0, 1])
        }
        "div_channel" => {
            let a = x4(rng);
            let b = away_from(rng, &[n], 2.0, &[0.0], 0.4);
            // channel axis 0
            (Box::new(|g, v| g.div_channel(v[0], v[1], 0)), vec![a, b], vec![0, 1])
        }
        "add_scalar" => (Box::new(|g, v| g.add_scalar(v[0], 0.7)), vec![x4(rng)], vec![0]),
        "mul_scalar" => (Box::new(|g, v| g.mul_scalar(v[0], -1.3)), vec![x4(rng)], vec![0]),
        "neg" => (Box::new(|g, v| g.neg(v[0])), vec![x4(rng)], vec![0]),
        "relu" => (
            Box::new(|g, v| g.relu(v[0])),
            vec![away_from(rng, &[n, c, hw, hw], 2.0, &[0.0], 0.01)],
            vec![0],
        ),
        "leaky_relu" => (
            Box::new(|g, v| g.leaky_relu(v[0], 0.2)),
            vec![away_from(rng, &[n, c, hw, hw], 2.0, &[0.0], 0.01)],
            vec![0],
        ),
        "tanh" => (Box::new(|g, v| g.tanh(v[0])), vec![x4(rng)], vec![0]),
        "sigmoid" => (Box::new(|g, v| g.sigmoid(v[0])), vec![x4(rng)], vec![0]),
        "pow" => {
            let e = rng.random_range(1.2..3.5);
            (
                Box::new(move |g, v| g.pow(v[0], e)),
                vec![positive(rng, &[n, c, hw, hw], 0.2, 2.0)],
                vec![0],
            )
        }
        "square" => (Box::new(|g, v| g.square(v[0])), vec![x4(rng)], vec![0]),
        "abs" => (
            Box::new(|g, v| g.abs(v[0])),
            vec![away_from(rng, &[n, c, hw, hw], 2.0, &[0.0], 0.01)],
            vec![0],
        ),
        "sqrt" => (Box::new(|g, v| g.sqrt(v[0])), vec![positive(rng, &[n, c, hw, hw], 0.2, 3.0)], vec![0]),
        "exp" => (Box::new(|g, v| g.exp(v[0])), vec![x4(rng)], vec![0]),
        "log" => (Box::new(|g, v| g.log(v[0])), vec![positive(rng, &[n, c, hw, hw], 0.2, 3.0)], vec![0]),
        "clamp" => (
            Box::new(|g, v| g.clamp(v[0], -0.5, 1.0)),
            vec![away_from(rng, &[n, c, hw, hw], 2.0, &[-0.5, 1.0], 0.01)],
            vec![0],
        ),
        "sum" => (Box::new(|g, v| g.sum(v[0])), vec![x4(rng)], vec![0]),
        "mean" => (Box::new(|g, v| g.mean(v[0])), vec![x4(rng)], vec![0]),
        "channel_mean" => (Box::new(|g, v| g.channel_mean(v[0], 1)), vec![x4(rng)], vec![0]),
        "channel_var" => (
            Box::new(|g, v| {
                let m = g.channel_mean(v[0], 1)?;
                g.channel_var(v[0], m, 1)
            }),
            vec![x4(rng)],
            vec![0],
        ),
        "reshape" => (
            Box::new(move |g, v| {
                let len = g.value(v[0]).len();
                let r = g.reshape(v[0], &[len])?;
                g.square(r)
            }),
            vec![x4(rng)],
            vec![0],
        ),
        "conv2d" => {
            let o = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize).min(hw);
            let stride = rng.random_range(1..3usize);
            let pad = rng.random_range(0..2usize);
            let w = away_from(rng, &[o, c, k, k], 1.0, &[], 0.0);
            let b = away_from(rng, &[o], 1.0, &[], 0.0);
            (
                Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                vec![x4(rng), w, b],
                vec![0, 1, 2],
            )
        }
        "reflection_pad2d" => {
            let p = (
                rng.random_range(0..hw),
                rng.random_range(0..hw),
                rng.random_range(0..hw),
                rng.random_range(0..hw),
            );
            (Box::new(move |g, v| g.reflection_pad2d(v[0], p)), vec![x4(rng)], vec![0])
        }
        "crop2d" => {
            let top = rng.random_range(0..2usize);
            let left = rng.random_range(0..2usize);
            (
                Box::new(move |g, v| g.crop2d(v[0], top, left, hw - 2, hw - 2)),
                vec![x4(rng)],
                vec![0],
            )
        }
        "swing_conv2d" => {
            let o = rng.random_range(1..4usize);
            let stride = rng.random_range(2..4usize);
            let off = (rng.random_range(0..stride), rng.random_range(0..stride));
            let w = away_from(rng, &[o, c, 3, 3], 1.0, &[], 0.0);
            (
                Box::new(move |g, v| swing_conv2d_at(g, v[0], v[1], None, stride, 1, off).map_err(|e| TensorError::Invalid(e.to_string()))),
                vec![x4(rng), w],
                vec![0, 1],
            )
        }
        "linear" => {
            let d = rng.random_range(1..6usize);
            let m = rng.random_range(1..6usize);
            (
                Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
                vec![
                    away_from(rng, &[n, d], 2.0, &[], 0.0),
                    away_from(rng, &[m, d], 1.0, &[], 0.0),
                    away_from(rng, &[m], 1.0, &[], 0.0),
                ],
                vec![0, 1, 2],
            )
        }
        "upsample_nearest2x" => (Box::new(|g, v| g.upsample_nearest2x(v[0])), vec![x4(rng)], vec![0]),
        "avg_pool2d" => {
            let x = away_from(rng, &[n, c, 2 * hw, 2 * hw], 2.0, &[], 0.0);
            (Box::new(|g, v| g.avg_pool2d(v[0], 2)), vec![x], vec![0])
        }
        "global_avg_pool" => (Box::new(|g, v| g.global_avg_pool(v[0])), vec![x4(rng)], vec![0]),
        "cross_entropy" => {
            let k = rng.random_range(2..6usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            (
                Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
                vec![away_from(rng, &[n, k], 3.0, &[], 0.0)],
                vec![0],
            )
        }
        "batchnorm2d_train" => {
            let n = n.max(2);
            let x = away_from(rng, &[n, c, hw, hw], 2.0, &[], 0.0);
            (
                Box::new(|g, v| {
                    let out = g.batchnorm2d(v[0], v[1], v[2], BnMode::Train, 1e-5)?;
                    // include the batch statistics in the checked output
                    let m = out.batch_mean.unwrap();
                    let s = out.batch_std.unwrap();
                    let a = g.sum(out.out)?;
                    let a2 = g.square(out.out)?;
                    let a2 = g.sum(a2)?;
                    let ms = g.sum(m)?;
                    let ss = g.sum(s)?;
                    let t = g.add(a, a2)?;
                    let t = g.add(t, ms)?;
                    g.add(t, ss)
                }),
                vec![x, positive(rng, &[c], 0.5, 1.5), vec_c(rng)],
                vec![0, 1, 2],
            )
        }
        "batchnorm2d_eval" => {
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            (
                Box::new(move |g, v| Ok(g.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?.out)),
                vec![x4(rng), positive(rng, &[c], 0.5, 1.5), vec_c(rng)],
                vec![0, 1, 2],
            )
        }
        "conv_bn_relu" => {
            let n = n.max(2);
            let o = rng.random_range(1..4usize);
            let w = away_from(rng, &[o, c, 3, 3], 1.0, &[], 0.0);
            let x = away_from(rng, &[n, c, hw, hw], 2.0, &[], 0.0);
            (
                Box::new(|g, v| {
                    let y = g.conv2d(v[0], v[1], None, 1, 1)?;
                    let y = g.batchnorm2d(y, v[2], v[3], BnMode::Train, 1e-5)?.out;
                    // a shifted relu keeps sample points off the kink with high probability
                    let y = g.add_scalar(y, 0.0123)?;
                    let y = g.leaky_relu(y, 0.3)?;
                    g.sum(y)
                }),
                vec![x, w, positive(rng, &[o], 0.5, 1.5), away_from(rng, &[o], 1.0, &[], 0.0)],
                vec![0, 1, 2, 3],
            )
        }
        "rectified_sigmoid" => (
            Box::new(|g, v| rectified_sigmoid_var(g, v[0])),
            // interior of the unclamped region: |V| < ~2.3
            vec![away_from(rng, &[n, c, hw], 2.0, &[], 0.0)],
            vec![0],
        ),
        "rounding_reg" => {
            let beta = rng.random_range(2.0..20.0);
            (
                Box::new(move |g, v| rounding_reg(g, v[0], beta)),
                vec![away_from(rng, &[c, hw], 2.0, &[0.0], 0.05)],
                vec![0],
            )
        }
        other => panic!("no instance generator for {}", other),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scalar_broadcast",
    "add_channel",
    "sub_channel",
    "mul_channel",
    "div_channel",
    "add_scalar",
    "mul_scalar",
    "neg",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "pow",
    "square",
    "abs",
    "sqrt",
    "exp",
    "log",
    "clamp",
    "sum",
    "mean",
    "channel_mean",
    "channel_var",
    "reshape",
    "conv2d",
    "reflection_pad2d",
    "crop2d",
    "swing_conv2d",
    "linear",
    "upsample_nearest2x",
    "avg_pool2d",
    "global_avg_pool",
    "cross_entropy",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "conv_bn_relu",
    "rectified_sigmoid",
    "rounding_reg",
];

/// Runs `instances` random instances of every op.
pub fn op_suite(instances: usize) -> Vec<OpCase> {
    OPS.iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let mut worst = 0.0f64;
            for i in 0..instances {
                let (f, inputs, wrt) = instance(name, &mut rng);
                worst = worst.max(rel_error(&*f, &inputs, &wrt, i as u64));
            }
            OpCase { name, instances, worst }
        })
        .collect()
}

/// Soft-quantized weights with the floor replaced by its straight-through
/// surrogate `u - frac(u0)`: the function whose derivative the STE backward
/// is supposed to deliver, evaluated at points away from clip boundaries.
pub fn soft_quant_surrogate_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let bounds = Bounds::asymmetric(4).unwrap();
    for i in 0..instances {
        let o = rng.random_range(1..4usize);
        let k = rng.random_range(2..6usize);
        let s = positive(&mut rng, &[o], 0.05, 0.2);
        let z: Vec<f64> = (0..o).map(|_| rng.random_range(5..10) as f64).collect();
        // weights well inside the grid and away from integer multiples of s
        let w = Tensor::from_fn(&[o, k], |j| {
            let c = j / k;
            let u = rng.random_range(-4.0..4.0f64).floor() + rng.random_range(0.1..0.9);
            u * s.data()[c]
        });
        let v = away_from(&mut rng, &[o, k], 1.5, &[], 0.0);
        let frac0: Vec<f64> = w
            .data()
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let u = x / s.data()[j / k];
                u - u.floor()
            })
            .collect();
        let zt = Tensor::new(vec![o], z.clone()).unwrap();
        // autodiff through the real op
        let mut g = Graph::<f64>::new();
        let wv = g.constant(&w);
        let sv = g.param(&s);
        let zv = g.constant(&zt);
        let vv = g.param(&v);
        let q = soft_quant_weights(&mut g, wv, sv, zv, vv, bounds).unwrap();
        let proj = projection(o * k, i as u64);
        let p = g.constant(&proj.clone().reshape(&[o, k]).unwrap());
        let prod = g.mul(q, p).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(sv).unwrap().to_vec();
        // surrogate in closed form
        let surrogate = |s: &[f64]| -> f64 {
            (0..o * k)
                .map(|j| {
                    let c = j / k;
                    let u = w.data()[j] / s[c] - frac0[j];
                    let h = genie_core::quant::rectified_sigmoid(v.data()[j]);
                    let q = (u + h + z[c]).clamp(bounds.n as f64, bounds.p as f64);
                    s[c] * (q - z[c]) * proj.data()[j]
                })
                .sum()
        };
        for c in 0..o {
            let mut plus = s.data().to_vec();
            plus[c] += H;
            let mut minus = s.data().to_vec();
            minus[c] -= H;
            let numeric = (surrogate(&plus) - surrogate(&minus)) / (2.0 * H);
            let rel = (analytic[c] - numeric).abs() / analytic[c].abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Largest deviation of the LSQ backward from its closed form
/// (`d/ds sum(x_q)` and `d/dx`), plus the STE backward of floor/round.
pub fn lsq_and_ste_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let bits = rng.random_range(2..9u32);
        let b = Bounds::symmetric(bits).unwrap();
        let len = rng.random_range(4..40usize);
        let s = rng.random_range(0.05..0.5);
        let x = away_from(&mut rng, &[len], s * (b.p as f64 + 3.0), &[], 0.0);
        let mut g = Graph::<f64>::new();
        let xv = g.param(&x);
        let sv = g.param(&Tensor::scalar(s));
        let q = genie_core::quant::primitives::lsq_fake_quant(&mut g, xv, sv, b).unwrap();
        let loss = g.sum(q).unwrap();
        g.backward(loss).unwrap();
        let gs = 1.0 / ((len as f64) * b.p as f64).sqrt();
        let mut ds = 0.0;
        for (j, &xi) in x.data().iter().enumerate() {
            let r = xi / s;
            let (d, dx) = if r < b.n as f64 {
                (b.n as f64, 0.0)
            } else if r > b.p as f64 {
                (b.p as f64, 0.0)
            } else {
                (r.round() - r, 1.0)
            };
            ds += d;
            worst = worst.max((g.grad(xv).unwrap()[j] - dx).abs());
        }
        worst = worst.max((g.grad(sv).unwrap()[0] - ds * gs).abs());

        let mut g = Graph::<f64>::new();
        let xv = g.param(&x);
        let f = g.floor_ste(xv).unwrap();
        let r = g.round_ste(xv).unwrap();
        let t = g.add(f, r).unwrap();
        let loss = g.sum(t).unwrap();
        g.backward(loss).unwrap();
        for &d in g.grad(xv).unwrap() {
            worst = worst.max((d - 2.0).abs());
        }
    }
    worst
}
