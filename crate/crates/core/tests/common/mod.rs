#![allow(dead_code)]

pub mod oracle;

use pitlab::model::{ModelConfig, ModelState, Reduction, Scored};
use pitlab::tensor::Segment;
use pitlab::tensor::{Tape, Tensor, Var};
use pitlab::tokenizer::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Five-point central finite differences of `f` at `x` (error O(h^4)).
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |d: f64| {
                x[i] = orig + d;
                f(&x)
            };
            let g = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            x[i] = orig;
            g
        })
        .collect()
}

/// Max-norm relative error. The scale is floored at 1e-4 so gradients that
/// are exactly zero (e.g. softmax over one column) are compared against
/// finite-difference round-off with an absolute tolerance instead.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-4, f64::max);
    diff / scale
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Worst relative error over all inputs of a scalar graph built by `build`.
pub fn check_graph(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).unwrap().into_data();
        let mut f = |x: &[f64]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    let val = if j == i { Tensor::from_vec(inp.shape(), x.to_vec()).unwrap() } else { inp.clone() };
                    t.leaf(val, true)
                })
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).unwrap().item()
        };
        let numeric = fd_grad(&mut f, inputs[i].data(), FD_STEP);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Projects an op output to a scalar with fixed random weights so every
/// output element influences the loss differently.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random_tensor(&mut rng, &shape, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(out, r).unwrap();
    tape.sum(m).unwrap()
}

/// Per-tensor relative error of single-precision analytic model gradients
/// against finite differences of a double-precision copy, checked on a
/// seeded sample of coordinates per tensor.
pub fn model_grad_check(model: &ModelState<f32>, batch: &[Scored], per_tensor: usize, seed: u64) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_grads(batch, Reduction::ExampleMean).unwrap();
    let reference = model.cast::<f64>();
    let (_, grads64) = reference.loss_and_grads(batch, Reduction::ExampleMean).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, name) in model.names().iter().enumerate() {
        let n = model.params()[i].len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > per_tensor {
            coords = rand::seq::index::sample(&mut rng, n, per_tensor).into_vec();
        }
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &c in &coords {
            analytic.push(grads[i].data()[c] as f64);
            let mut probe = reference.clone();
            let orig = probe.params()[i].data()[c];
            let eval = |delta: f64, probe: &mut ModelState<f64>| {
                probe.params_mut()[i].data_mut()[c] = orig + delta;
                probe.loss(batch, Reduction::ExampleMean).unwrap()
            };
            let up = eval(FD_STEP, &mut probe);
            let down = eval(-FD_STEP, &mut probe);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        // Scale by the whole tensor's gradient so near-zero sampled entries
        // are judged against the tensor's magnitude.
        let scale = grads64[i].data().iter().map(|v| v.abs()).fold(1e-8, f64::max);
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        out.push((name.clone(), diff / scale));
    }
    out
}

pub type Maker = Box<dyn Fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor<f64>>, Box<Build>)>;

pub const OP_TRIALS: u64 = 100;
pub const DOUBLE_TOL: f64 = 1e-6;
pub const SINGLE_TOL: f64 = 1e-3;

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

/// Every differentiable tape op, each with a generator of random inputs and
/// a scalar graph.
pub fn op_cases() -> Vec<(&'static str, Maker)> {
    vec![
        (
            "add",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[r, c], 1.0), random_tensor(rng, &[r, c], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.add(v[0], v[1]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "mul",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[r, c], 1.0), random_tensor(rng, &[r, c], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.mul(v[0], v[1]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "add_row",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[r, c], 1.0), random_tensor(rng, &[c], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.add_row(v[0], v[1]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "scale",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), dim(rng));
                let k = rng.gen_range(-2.0..2.0);
                (
                    vec![random_tensor(rng, &[r, c], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.scale(v[0], k).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "gelu",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[r, c], 3.0)],
                    Box::new(move |t, v| {
                        let o = t.gelu(v[0]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "matmul",
            Box::new(|rng, s| {
                let (n, k, m) = (dim(rng), dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[n, k], 1.0), random_tensor(rng, &[k, m], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.matmul(v[0], v[1]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "matmul_bt",
            Box::new(|rng, s| {
                let (n, k, m) = (dim(rng), dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[n, k], 1.0), random_tensor(rng, &[m, k], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.matmul_bt(v[0], v[1]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "embedding",
            Box::new(|rng, s| {
                let (vocab, d) = (dim(rng), dim(rng));
                let ids: Vec<usize> = (0..dim(rng)).map(|_| rng.gen_range(0..vocab)).collect();
                (
                    vec![random_tensor(rng, &[vocab, d], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.embedding(v[0], &ids).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "gather_rows",
            Box::new(|rng, s| {
                let (n, d) = (dim(rng), dim(rng));
                let rows: Vec<usize> = (0..dim(rng)).map(|_| rng.gen_range(0..n)).collect();
                (
                    vec![random_tensor(rng, &[n, d], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.gather_rows(v[0], &rows).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "softmax",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[r, c], 3.0)],
                    Box::new(move |t, v| {
                        let o = t.softmax(v[0]).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "layer_norm",
            Box::new(|rng, s| {
                let (r, c) = (dim(rng), rng.gen_range(2..=8));
                (
                    vec![
                        random_tensor(rng, &[r, c], 2.0),
                        random_tensor(rng, &[c], 1.5),
                        random_tensor(rng, &[c], 1.0),
                    ],
                    Box::new(move |t, v| {
                        let o = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "sum",
            Box::new(|rng, _| {
                let (r, c) = (dim(rng), dim(rng));
                (vec![random_tensor(rng, &[r, c], 1.0)], Box::new(|t, v| t.sum(v[0]).unwrap()))
            }),
        ),
        (
            "causal_scores",
            Box::new(|rng, s| {
                let (n, d) = (dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[n, d], 1.0), random_tensor(rng, &[n, d], 1.0)],
                    Box::new(move |t, v| {
                        let sc = t.causal_masked_attention_scores(v[0], v[1]).unwrap();
                        let p = t.softmax(sc).unwrap();
                        project(t, p, s)
                    }),
                )
            }),
        ),
        (
            "attention",
            Box::new(|rng, s| {
                let heads = rng.gen_range(1..=2);
                let dh = rng.gen_range(1..=4);
                let mut segments = Vec::new();
                let mut n = 0;
                for _ in 0..rng.gen_range(1..=3) {
                    let len = rng.gen_range(1..=4);
                    segments.push(Segment { start: n, len });
                    n += len;
                }
                (
                    vec![random_tensor(rng, &[n, 3 * heads * dh], 1.0)],
                    Box::new(move |t, v| {
                        let o = t.attention(v[0], &segments, heads).unwrap();
                        project(t, o, s)
                    }),
                )
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng, _| {
                let (n, v) = (dim(rng), rng.gen_range(2..=8));
                let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
                let mut weights: Vec<f64> =
                    (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.1..2.0) }).collect();
                weights[0] = 1.0;
                (
                    vec![random_tensor(rng, &[n, v], 3.0)],
                    Box::new(move |t, x| t.cross_entropy(x[0], &targets, &weights).unwrap()),
                )
            }),
        ),
        (
            "sum(gelu(Wx))",
            Box::new(|rng, _| {
                let (n, k, m) = (dim(rng), dim(rng), dim(rng));
                (
                    vec![random_tensor(rng, &[n, k], 1.0), random_tensor(rng, &[k, m], 1.0)],
                    Box::new(|t, v| {
                        let h = t.matmul(v[0], v[1]).unwrap();
                        let g = t.gelu(h).unwrap();
                        t.sum(g).unwrap()
                    }),
                )
            }),
        ),
    ]
}

/// Worst relative error of one op over `trials` seeded draws.
pub fn op_worst(make: &Maker, trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, build) = make(&mut rng, seed);
        worst = worst.max(check_graph(&inputs, build.as_ref()));
    }
    worst
}

/// Two-layer model and a three-example batch with some zero weights.
pub fn grad_model(seed: u64) -> ModelState<f32> {
    let words: Vec<String> = (0..26).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_texts(words.iter().map(String::as_str));
    ModelState::init(ModelConfig::new(2, 4, 32, 16, vocab.len(), seed), vocab).unwrap()
}

pub fn grad_batch() -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut toks = Vec::new();
    let mut weights = Vec::new();
    for len in [9usize, 5, 12] {
        let t: Vec<u32> = (0..len).map(|_| rng.gen_range(1..32)).collect();
        let w: Vec<f64> = (1..len).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        toks.push(t);
        weights.push(w);
    }
    (toks, weights)
}

/// Per-tensor relative error of double-precision model gradients against
/// central differences on a seeded sample of coordinates.
pub fn model_grad_check_f64(
    model: &ModelState<f64>,
    batch: &[Scored],
    per_tensor: usize,
    seed: u64,
) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_grads(batch, Reduction::ExampleMean).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, name) in model.names().iter().enumerate() {
        let n = model.params()[i].len();
        let coords = rand::seq::index::sample(&mut rng, n, n.min(per_tensor)).into_vec();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for c in coords {
            let mut probe = model.clone();
            let orig = probe.params()[i].data()[c];
            probe.params_mut()[i].data_mut()[c] = orig + FD_STEP;
            let up = probe.loss(batch, Reduction::ExampleMean).unwrap();
            probe.params_mut()[i].data_mut()[c] = orig - FD_STEP;
            let down = probe.loss(batch, Reduction::ExampleMean).unwrap();
            analytic.push(grads[i].data()[c]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let scale = grads[i].data().iter().map(|v| v.abs()).fold(1e-8, f64::max);
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.push((name.clone(), diff / scale));
    }
    out
}

/// Negative log-likelihoods of every next token, computed from the logits of
/// a double-precision model.
pub fn token_nlls(m: &ModelState<f64>, tokens: &[u32]) -> Vec<f64> {
    let logits = m.forward(tokens).unwrap();
    let v = m.config.vocab_size;
    (0..tokens.len() - 1)
        .map(|t| {
            let row = &logits.data()[t * v..(t + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[tokens[t + 1] as usize]
        })
        .collect()
}
