//! Brute-force loop oracles for the forward kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsem::tensor::ops::{self, BatchNormState, LstmWeights};
use tsem::tensor::{NormMode, Padding};
use tsem::Tensor;

use super::gradcheck::rand_tensor;

pub const TOL: f64 = 1e-9;

/// Direct convolution of (C_in, D, T) with (C_out, C_in, kH, kW), symmetric padding.
pub fn conv2d(x: &Tensor, k: &Tensor, pad: [usize; 2], stride: [usize; 2]) -> Tensor {
    let (ci, d, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (d + 2 * pad[0] - kh) / stride[0] + 1;
    let wo = (t + 2 * pad[1] - kw) / stride[1] + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for p in 0..kh {
                        for q in 0..kw {
                            let r = (i * stride[0] + p) as isize - pad[0] as isize;
                            let s = (j * stride[1] + q) as isize - pad[1] as isize;
                            if r >= 0 && s >= 0 && (r as usize) < d && (s as usize) < t {
                                acc += k.get(&[o, c, p, q]) * x.get(&[c, r as usize, s as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, i, j], acc);
            }
        }
    }
    out
}

pub fn conv1d(x: &Tensor, k: &Tensor, pad: usize, stride: usize) -> Tensor {
    let (ci, t) = (x.shape()[0], x.shape()[1]);
    let (co, kw) = (k.shape()[0], k.shape()[2]);
    let to = (t + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, to]);
    for o in 0..co {
        for j in 0..to {
            let mut acc = 0.0;
            for c in 0..ci {
                for q in 0..kw {
                    let s = (j * stride + q) as isize - pad as isize;
                    if s >= 0 && (s as usize) < t {
                        acc += k.get(&[o, c, q]) * x.get(&[c, s as usize]);
                    }
                }
            }
            out.set(&[o, j], acc);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar-loop LSTM recurrence, gate order input, forget, cell, output.
pub fn lstm(x: &Tensor, w: &LstmWeights) -> Tensor {
    let (steps, feats) = (x.shape()[0], x.shape()[1]);
    let hid = w.hidden_size();
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    let mut out = Tensor::zeros(&[steps, hid]);
    for s in 0..steps {
        let mut pre = vec![0.0; 4 * hid];
        for (g, p) in pre.iter_mut().enumerate() {
            *p = w.bias.data()[g];
            for f in 0..feats {
                *p += w.w_ih.get(&[g, f]) * x.get(&[s, f]);
            }
            for (j, hj) in h.iter().enumerate() {
                *p += w.w_hh.get(&[g, j]) * hj;
            }
        }
        for j in 0..hid {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[hid + j]);
            let g = pre[2 * hid + j].tanh();
            let o = sigmoid(pre[3 * hid + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
            out.set(&[s, j], h[j]);
        }
    }
    out
}

/// Two-pass batch statistics over (B, C, L), channel axis 1.
pub fn batchnorm(x: &Tensor, eps: f64) -> Tensor {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (b * l) as f64;
    let mut out = x.clone();
    for ch in 0..c {
        let mut mean = 0.0;
        for i in 0..b {
            for j in 0..l {
                mean += x.get(&[i, ch, j]);
            }
        }
        mean /= n;
        let mut var = 0.0;
        for i in 0..b {
            for j in 0..l {
                var += (x.get(&[i, ch, j]) - mean).powi(2);
            }
        }
        var /= n;
        for i in 0..b {
            for j in 0..l {
                out.set(
                    &[i, ch, j],
                    (x.get(&[i, ch, j]) - mean) / (var + eps).sqrt(),
                );
            }
        }
    }
    out
}

/// Largest deviation of each kernel from its oracle over `trials` random instances.
pub fn worst_errors(trials: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [
        ("conv2d", 0.0f64),
        ("conv1d", 0.0),
        ("lstm", 0.0),
        ("batchnorm", 0.0),
    ];
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        let (ci, co, d, t) = (dim(1, 3), dim(1, 4), dim(2, 5), dim(4, 10));
        let (kh, kw, ph, pw, sh, sw) = (
            dim(1, 2),
            dim(1, 3),
            dim(0, 1),
            dim(0, 2),
            dim(1, 2),
            dim(1, 2),
        );
        let (steps, feats, hid, b) = (dim(1, 6), dim(1, 3), dim(1, 4), dim(2, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut r = |s: &[usize]| rand_tensor(&mut rng, s);

        let x = r(&[ci, d, t]);
        let k = r(&[co, ci, kh, kw]);
        let got = ops::conv2d_forward(
            &x,
            &k,
            [Padding::symmetric(ph), Padding::symmetric(pw)],
            [sh, sw],
        )
        .unwrap();
        worst[0].1 = worst[0]
            .1
            .max(got.max_abs_diff(&conv2d(&x, &k, [ph, pw], [sh, sw])));

        let x = r(&[ci, t]);
        let k = r(&[co, ci, kw]);
        let got = ops::conv1d_forward(&x, &k, Padding::symmetric(pw), sw).unwrap();
        worst[1].1 = worst[1].1.max(got.max_abs_diff(&conv1d(&x, &k, pw, sw)));

        let x = r(&[steps, feats]);
        let w = LstmWeights {
            w_ih: r(&[4 * hid, feats]),
            w_hh: r(&[4 * hid, hid]),
            bias: r(&[4 * hid]),
        };
        let (seq, last) = ops::lstm_forward(&x, &w).unwrap();
        let want = lstm(&x, &w);
        worst[2].1 = worst[2].1.max(seq.max_abs_diff(&want));
        worst[2].1 = worst[2].1.max(
            last.data()
                .iter()
                .zip(want.row(steps - 1))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );

        let x = r(&[b, ci, t]).map(|v| 3.0 * v + 1.0);
        let mut state = BatchNormState::new(ci);
        let got = ops::batchnorm_forward(&x, 1, NormMode::Train, &mut state, 1e-5).unwrap();
        worst[3].1 = worst[3].1.max(got.max_abs_diff(&batchnorm(&x, 1e-5)));
    }
    worst.to_vec()
}
