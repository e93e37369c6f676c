//! Central finite-difference checks for every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsem::tensor::{NormMode, Padding};
use tsem::{Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const SEEDS: u64 = 20;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

/// Scalar objective: sum(out * r) for a fixed random r, so every output
/// element contributes with a distinct weight.
fn objective(case: &Case, inputs: &[Tensor], r: &Tensor) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

/// Worst norm-wise relative error over the case's inputs.
pub fn max_relative_error(case: &Case, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, tape.shape(out));

    let (tape, vars, loss) = objective(case, &case.inputs, &r);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *v);
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut xs = case.inputs.clone();
                xs[i].data_mut()[j] += delta;
                let (t, _, l) = objective(case, &xs, &r);
                t.value(l).data()[0]
            };
            *slot = (eval(H) - eval(-H)) / (2.0 * H);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let err = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(err);
    }
    worst
}

/// One randomly shaped instance of every differentiable op for `seed`.
pub fn cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c) = (dim(1, 3), dim(2, 4), dim(2, 5));
    let (batch, cin, cout) = (dim(1, 2), dim(1, 3), dim(1, 3));
    let (hh, ww, kh, kw) = (dim(2, 4), dim(4, 7), dim(1, 2), dim(1, 3));
    let (ph, pw, sw) = (dim(0, 1), dim(0, 2), dim(1, 2));
    let (steps, feats, hidden) = (dim(2, 5), dim(1, 3), dim(1, 4));
    let (len, target) = (dim(1, 5), dim(2, 9));
    let k_classes = dim(2, 5);
    let labels: Vec<usize> = (0..a).map(|_| dim(0, k_classes - 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 1);
    let mut t = |shape: &[usize]| rand_tensor(&mut rng, shape);

    let pad = [
        Padding {
            before: ph,
            after: 0,
        },
        Padding {
            before: pw,
            after: pw / 2,
        },
    ];
    let stride = [1, sw];
    vec![
        (
            "add",
            case(vec![t(&[a, b]), t(&[a, b])], |tp, v| {
                tp.add(v[0], v[1]).unwrap()
            }),
        ),
        (
            "sub",
            case(vec![t(&[a, b]), t(&[a, b])], |tp, v| {
                tp.sub(v[0], v[1]).unwrap()
            }),
        ),
        (
            "mul",
            case(vec![t(&[a, b, c]), t(&[a, b, c])], |tp, v| {
                tp.mul(v[0], v[1]).unwrap()
            }),
        ),
        (
            "scale",
            case(vec![t(&[b, c])], |tp, v| tp.scale(v[0], -1.7)),
        ),
        ("relu", case(vec![t(&[a, c])], |tp, v| tp.relu(v[0]))),
        ("sigmoid", case(vec![t(&[a, c])], |tp, v| tp.sigmoid(v[0]))),
        ("tanh", case(vec![t(&[a, c])], |tp, v| tp.tanh(v[0]))),
        (
            "softmax",
            case(vec![t(&[a, c]).map(|x| 3.0 * x)], |tp, v| tp.softmax(v[0])),
        ),
        ("sum", case(vec![t(&[a, b])], |tp, v| tp.sum(v[0]))),
        ("mean", case(vec![t(&[a, b])], |tp, v| tp.mean(v[0]))),
        (
            "mean_trailing",
            case(vec![t(&[a, b, c])], |tp, v| {
                tp.mean_trailing(v[0], 1).unwrap()
            }),
        ),
        (
            "reshape",
            case(vec![t(&[a, b, c])], move |tp, v| {
                tp.reshape(v[0], &[a * b, c]).unwrap()
            }),
        ),
        (
            "transpose",
            case(vec![t(&[a, b, c])], |tp, v| tp.transpose(v[0]).unwrap()),
        ),
        (
            "concat",
            case(vec![t(&[a, b, c]), t(&[a, 1, c])], |tp, v| {
                tp.concat(&[v[0], v[1]], 1).unwrap()
            }),
        ),
        (
            "slice",
            case(vec![t(&[a, b, c])], |tp, v| {
                tp.slice(v[0], 2, 1, 1).unwrap()
            }),
        ),
        (
            "matmul",
            case(vec![t(&[a, b]), t(&[b, c])], |tp, v| {
                tp.matmul(v[0], v[1]).unwrap()
            }),
        ),
        (
            "linear",
            case(vec![t(&[a, b]), t(&[c, b]), t(&[c])], |tp, v| {
                tp.linear(v[0], v[1], v[2]).unwrap()
            }),
        ),
        (
            "conv2d",
            case(
                vec![
                    t(&[batch, cin, hh, ww]),
                    t(&[cout, cin, kh, kw]),
                    t(&[cout]),
                ],
                move |tp, v| tp.conv2d(v[0], v[1], Some(v[2]), pad, stride).unwrap(),
            ),
        ),
        (
            "conv1d",
            case(
                vec![t(&[batch, cin, ww]), t(&[cout, cin, kw])],
                move |tp, v| tp.conv1d(v[0], v[1], None, Padding::same(kw), sw).unwrap(),
            ),
        ),
        (
            "lstm",
            case(
                vec![
                    t(&[batch, steps, feats]),
                    t(&[4 * hidden, feats]),
                    t(&[4 * hidden, hidden]),
                    t(&[4 * hidden]),
                ],
                |tp, v| tp.lstm(v[0], v[1], v[2], v[3]).unwrap(),
            ),
        ),
        (
            "batch_norm_train",
            case(
                vec![t(&[batch + 1, cin, ww]), t(&[cin]), t(&[cin])],
                |tp, v| {
                    let c = tp.shape(v[1])[0];
                    let (m, s) = (vec![0.0; c], vec![1.0; c]);
                    tp.batch_norm(v[0], v[1], v[2], 1, NormMode::Train, (&m, &s), 1e-5)
                        .unwrap()
                        .0
                },
            ),
        ),
        (
            "batch_norm_infer",
            case(vec![t(&[batch, cin, ww]), t(&[cin]), t(&[cin])], |tp, v| {
                let c = tp.shape(v[1])[0];
                let m: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
                let s: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
                tp.batch_norm(v[0], v[1], v[2], 1, NormMode::Infer, (&m, &s), 1e-5)
                    .unwrap()
                    .0
            }),
        ),
        (
            "upsample_linear",
            case(vec![t(&[a, len])], move |tp, v| {
                tp.upsample_linear(v[0], target).unwrap()
            }),
        ),
        (
            "mul_gate",
            case(vec![t(&[batch, cout, b, ww]), t(&[batch, ww])], |tp, v| {
                tp.mul_gate(v[0], v[1]).unwrap()
            }),
        ),
        (
            "cross_entropy",
            case(vec![t(&[a, k_classes])], move |tp, v| {
                tp.cross_entropy(v[0], &labels).unwrap()
            }),
        ),
    ]
}

/// Runs every op over every seed; returns failures as (op, seed, error).
pub fn run_all() -> Vec<(&'static str, u64, f64)> {
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        for (name, c) in cases(seed) {
            let err = max_relative_error(&c, seed);
            if err.is_nan() || err >= TOL {
                failures.push((name, seed, err));
            }
        }
    }
    failures
}
