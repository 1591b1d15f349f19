#![allow(dead_code)]

pub mod meta;

use fusion_core::bench::{CLRunRecord, ReplayBuffer};
use fusion_core::rng::stream;
use fusion_core::tensor::{Tape, Tensor, Var};
use fusion_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub type Builder<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Central finite differences of a scalar-valued tape program.
pub fn numeric_grads(inputs: &[Tensor], build: Builder, h: f64) -> Vec<Vec<f64>> {
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.value(out)[0]
    };
    let mut grads = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let mut g = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            g[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

pub fn analytic_grads(inputs: &[Tensor], build: Builder) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

/// Largest relative discrepancy; magnitudes below `floor` are compared absolutely.
pub fn max_rel_error(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn gradcheck(inputs: &[Tensor], build: Builder) -> f64 {
    let an = analytic_grads(inputs, build);
    let nu = numeric_grads(inputs, build, 1e-5);
    max_rel_error(&an, &nu, 1e-2)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `±[0.05, 1]`, away from the relu kink.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output element carries a distinct weight.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&mut rng(seed), &shape);
    let wv = tape.constant(&w);
    let p = tape.mul(x, wv)?;
    Ok(tape.sum(p))
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "conv2d",
    "softmax",
    "cross_entropy",
    "relu",
    "tanh",
    "sigmoid",
    "linear",
    "flatten",
    "mean",
    "sum",
    "add",
    "sub",
    "mul",
    "scale",
    "channel_bias",
    "mse",
];

/// Builds a random instance of a primitive: inputs plus a scalar program using it.
pub fn primitive_case(
    name: &str,
    seed: u64,
) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>) {
    let mut r = rng(seed);
    let dim = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.random_range(lo..=hi);
    let ws = seed.wrapping_mul(31).wrapping_add(7);
    match name {
        "matmul" => {
            let (m, k, n) = (dim(&mut r, 1, 5), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
            let inputs = vec![random_tensor(&mut r, &[m, k]), random_tensor(&mut r, &[k, n])];
            (inputs, Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, ws)
            }))
        }
        "conv2d" => {
            let (n, c, f) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
            let (kh, kw) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
            let (h, w) = (dim(&mut r, kh, 6), dim(&mut r, kw, 6));
            let stride = dim(&mut r, 1, 2);
            let inputs = vec![
                random_tensor(&mut r, &[n, c, h, w]),
                random_tensor(&mut r, &[f, c, kh, kw]),
            ];
            (inputs, Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], stride)?;
                weighted_sum(t, y, ws)
            }))
        }
        "softmax" => {
            let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 6));
            (vec![random_tensor(&mut r, &[m, n])], Box::new(move |t, v| {
                let y = t.softmax_rows(v[0])?;
                weighted_sum(t, y, ws)
            }))
        }
        "cross_entropy" => {
            let (b, c) = (dim(&mut r, 1, 5), dim(&mut r, 2, 6));
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            (vec![random_tensor(&mut r, &[b, c])], Box::new(move |t, v| {
                t.cross_entropy(v[0], &labels)
            }))
        }
        "relu" | "tanh" | "sigmoid" | "sum" | "mean" | "scale" | "flatten" => {
            let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 4)];
            let name = name.to_string();
            (vec![random_tensor(&mut r, &shape)], Box::new(move |t, v| {
                let y = match name.as_str() {
                    "relu" => t.relu(v[0]),
                    "tanh" => t.tanh(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    "scale" => t.scale(v[0], -1.7),
                    "flatten" => t.flatten(v[0])?,
                    "sum" => {
                        let s = t.sum(v[0]);
                        return Ok(t.scale(s, 0.5));
                    }
                    "mean" => return t.mean(v[0]),
                    _ => unreachable!(),
                };
                weighted_sum(t, y, ws)
            }))
        }
        "linear" => {
            let (b, i, o) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
            let inputs = vec![
                random_tensor(&mut r, &[b, i]),
                random_tensor(&mut r, &[i, o]),
                random_tensor(&mut r, &[o]),
            ];
            (inputs, Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, ws)
            }))
        }
        "add" | "sub" | "mul" | "mse" => {
            let shape = [dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
            let inputs = vec![random_tensor(&mut r, &shape), random_tensor(&mut r, &shape)];
            let name = name.to_string();
            (inputs, Box::new(move |t, v| {
                let y = match name.as_str() {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    "mul" => t.mul(v[0], v[1])?,
                    "mse" => return t.mse(v[0], v[1]),
                    _ => unreachable!(),
                };
                weighted_sum(t, y, ws)
            }))
        }
        "channel_bias" => {
            let (n, c, h, w) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
            let inputs = vec![random_tensor(&mut r, &[n, c, h, w]), random_tensor(&mut r, &[c])];
            (inputs, Box::new(move |t, v| {
                let y = t.add_channel_bias(v[0], v[1])?;
                weighted_sum(t, y, ws)
            }))
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub fn record(acc: Vec<Vec<f64>>, init: Vec<f64>) -> CLRunRecord {
    CLRunRecord { acc_matrix: acc, random_init_acc: init, final_acc: 0.0, inner_steps: 0, outer_steps: 0 }
}

/// p-value of a χ² test that a capacity-1 reservoir over ids `0..10000`
/// keeps each tenth of the stream equally often.
pub fn reservoir_chi2_p(trials: u64) -> f64 {
    let mut bins = [0usize; 10];
    for seed in 0..trials {
        let mut b = ReplayBuffer::new(1);
        let mut r = stream(seed, 42);
        for id in 0..10_000usize {
            b.insert(&[], id, &mut r);
        }
        bins[b.labels()[0] / 1000] += 1;
    }
    let expected = trials as f64 / 10.0;
    let stat: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new(9.0).unwrap().cdf(stat)
}

/// Accuracy matrices, random-init rows and hand-evaluated (fwt, bwt, forgetting).
pub fn hand_metric_cases() -> Vec<(Vec<Vec<f64>>, Vec<f64>, [f64; 3])> {
    vec![
        (
            vec![vec![90., 5., 5.], vec![80., 90., 5.], vec![70., 80., 90.]],
            vec![10., 10., 10.],
            // fwt: (5-10 + 5-10)/2; bwt: (70-90 + 80-90)/2; forgetting: (90-70 + 90-80)/2
            [-5.0, -15.0, 15.0],
        ),
        (vec![vec![50., 50.], vec![50., 50.]], vec![50., 50.], [0.0, 0.0, 0.0]),
        (
            vec![vec![60., 20.], vec![75., 95.]],
            vec![10., 30.],
            // backward transfer can be positive; forgetting then is negative
            [-10.0, 15.0, -15.0],
        ),
        (
            vec![vec![100., 0., 0., 0.], vec![50., 100., 0., 0.], vec![60., 40., 100., 0.], vec![30., 20., 10., 100.]],
            vec![0., 0., 0., 0.],
            // bwt: (-70 - 80 - 90)/3; forgetting: (100-30 + 100-20 + 100-10)/3
            [0.0, -80.0, 80.0],
        ),
        (vec![vec![42.]], vec![12.], [0.0, 0.0, 0.0]),
    ]
}
