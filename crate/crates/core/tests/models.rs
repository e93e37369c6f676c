use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsem::data::MTSDataset;
use tsem::models::{
    evaluate, from_bytes, load_model, save_model, to_bytes, train, Architecture, Mode, Model,
    ModelConfig, TrainConfig,
};
use tsem::optim::AdamConfig;
use tsem::tensor::ops::{self, BatchNormState, LstmWeights};
use tsem::tensor::{NormMode, Padding};
use tsem::{Error, Tensor};

fn small(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::new(arch, 3, 8, 2);
    c.window_fraction = 0.25;
    c.filters_2d = 4;
    c.filters_1d = 5;
    c.seed = 3;
    c
}

fn noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_dataset(n: usize, d: usize, t: usize, k: usize, seed: u64) -> MTSDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = (0..n).map(|_| noise(&mut rng, &[d, t])).collect();
    let labels = (0..n).map(|i| i % k).collect();
    MTSDataset::new("noise", xs, labels, (0..k).map(|c| c.to_string()).collect()).unwrap()
}

#[test]
fn outputs_are_probability_simplexes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in Architecture::ALL {
        let m = Model::new(small(arch)).unwrap();
        assert_eq!(m.config().window_size(), 2);
        let x = noise(&mut rng, &[5, 3, 8]);
        let p = m.predict_batch(&x).unwrap();
        assert_eq!(p.shape(), &[5, 2]);
        for r in 0..5 {
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12, "{arch}");
        }
    }
}

#[test]
fn registry_keys_and_shapes() {
    let x = noise(&mut ChaCha8Rng::seed_from_u64(2), &[2, 3, 8]);
    for arch in Architecture::ALL {
        let m = Model::new(small(arch)).unwrap();
        let pass = m.forward(&x, Mode::Eval, None).unwrap();
        for key in ["branch1_maps", "pre_gap_maps", "logits", "probs"] {
            assert!(pass.activation(key).is_ok(), "{arch} lacks {key}");
        }
        assert_eq!(
            pass.activation("temporal_vector").is_ok(),
            arch != Architecture::MtexCnn
        );
        assert!(matches!(
            pass.activation("nope"),
            Err(Error::UnknownActivation(_))
        ));
    }
    let xcm = Model::new(small(Architecture::Xcm)).unwrap();
    let pass = xcm.forward(&x, Mode::Eval, None).unwrap();
    // one extra row for the temporal branch: (D + 1) x T
    assert_eq!(pass.value("concat_map").unwrap().shape(), &[2, 1, 4, 8]);
    assert_eq!(pass.value("branch1_maps").unwrap().shape(), &[2, 4, 3, 8]);
    assert_eq!(pass.value("temporal_vector").unwrap().shape(), &[2, 8]);
}

#[test]
fn mtex_halves_time_twice() {
    let mut c = small(Architecture::MtexCnn);
    c.seq_length = 16;
    let m = Model::new(c).unwrap();
    let pass = m
        .forward_one(&Tensor::zeros(&[3, 16]), Mode::Eval, None)
        .unwrap();
    assert_eq!(pass.value("branch1_maps").unwrap().shape(), &[1, 4, 3, 4]);
    assert_eq!(pass.value("pre_gap_maps").unwrap().shape(), &[1, 5, 1, 4]);
}

#[test]
fn tsem_gate_of_ones_is_identity() {
    let m = Model::new(small(Architecture::Tsem)).unwrap();
    let x = noise(&mut ChaCha8Rng::seed_from_u64(3), &[2, 3, 8]);
    let mut force =
        |key: &str, v: &Tensor| (key == "temporal_vector").then(|| Tensor::ones(v.shape()));
    let pass = m.forward(&x, Mode::Eval, Some(&mut force)).unwrap();
    assert_eq!(
        pass.value("fused_maps").unwrap(),
        pass.value("branch1_maps").unwrap()
    );
}

#[test]
fn tsem_gate_of_zeros_leaves_the_bias_image() {
    let m = Model::new(small(Architecture::Tsem)).unwrap();
    let x = noise(&mut ChaCha8Rng::seed_from_u64(4), &[1, 3, 8]);
    let mut force =
        |key: &str, v: &Tensor| (key == "temporal_vector").then(|| Tensor::zeros(v.shape()));
    let pass = m.forward(&x, Mode::Eval, Some(&mut force)).unwrap();
    assert!(pass
        .value("fused_maps")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    // zero maps: the head conv emits relu(bias) everywhere, so every pooled
    // feature for filter f equals relu(b_f)
    let p = m.params();
    let (cb, w, b) = (
        p.get("head.conv.b"),
        p.get("head.dense.w"),
        p.get("head.dense.b"),
    );
    let rows = 3;
    for class in 0..2 {
        let mut want = b.data()[class];
        for f in 0..5 {
            for r in 0..rows {
                want += w.get(&[class, f * rows + r]) * cb.data()[f].max(0.0);
            }
        }
        assert!((pass.logits_of(0).data()[class] - want).abs() < 1e-12);
    }
}

/// TSEM at initialization (batch norm gamma 1, beta 0, running stats 0/1)
/// rebuilt from the separately tested forward ops.
#[test]
fn tsem_forward_matches_op_composition() {
    let m = Model::new(small(Architecture::Tsem)).unwrap();
    let x = noise(&mut ChaCha8Rng::seed_from_u64(5), &[3, 8]);
    let p = m.params();
    let (d, t, w) = (3, 8, 2);
    let same = Padding::same(w);

    let add_bias = |mut y: Tensor, b: &Tensor| {
        let per = y.numel() / b.numel();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i / per];
        }
        y
    };
    let x1 = x.reshape(&[1, d, t]).unwrap();
    let b1 = ops::conv2d_forward(&x1, p.get("b1.conv.w"), [Padding::NONE, same], [1, 1]).unwrap();
    let b1 = add_bias(b1, p.get("b1.conv.b"));
    let b1 = b1.reshape(&[1, 4, d, t]).unwrap();
    let b1 =
        ops::batchnorm_forward(&b1, 1, NormMode::Infer, &mut BatchNormState::new(4), 1e-5).unwrap();
    let b1 = ops::relu(&b1).outer(0);

    let seq: Vec<Vec<f64>> = (0..t)
        .map(|s| (0..d).map(|c| x.get(&[c, s])).collect())
        .collect();
    let lw = LstmWeights {
        w_ih: p.get("lstm.w_ih").clone(),
        w_hh: p.get("lstm.w_hh").clone(),
        bias: p.get("lstm.b").clone(),
    };
    let (_, last) = ops::lstm_forward(&Tensor::from_rows(&seq).unwrap(), &lw).unwrap();
    let g = ops::relu(&ops::upsample_linear_1d(&last, t).unwrap());

    let mut fused = b1.clone();
    for (i, v) in fused.data_mut().iter_mut().enumerate() {
        *v *= g.data()[i % t];
    }
    let y =
        ops::conv2d_forward(&fused, p.get("head.conv.w"), [Padding::NONE, same], [1, 1]).unwrap();
    let y = ops::relu(&add_bias(y, p.get("head.conv.b")));
    let pooled = ops::global_average_pool(&y.reshape(&[5 * d, t]).unwrap()).unwrap();
    let (dw, db) = (p.get("head.dense.w"), p.get("head.dense.b"));
    let logits: Vec<f64> = (0..2)
        .map(|c| {
            db.data()[c]
                + (0..5 * d)
                    .map(|j| dw.get(&[c, j]) * pooled.data()[j])
                    .sum::<f64>()
        })
        .collect();
    let want = ops::softmax(&Tensor::vector(&logits));
    let got = m.predict_proba(&x).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12, "{got:?} vs {want:?}");
}

#[test]
fn permuting_dense_rows_permutes_probabilities() {
    let m = Model::new(small(Architecture::Xcm)).unwrap();
    let mut swapped = m.clone();
    let store = swapped.params_mut();
    for name in ["head.dense.w", "head.dense.b"] {
        let t = store.params.get_mut(name).unwrap();
        let half = t.numel() / 2;
        let (a, b) = t.data_mut().split_at_mut(half);
        a.swap_with_slice(b);
    }
    let x = noise(&mut ChaCha8Rng::seed_from_u64(6), &[3, 8]);
    let (p, q) = (
        m.predict_proba(&x).unwrap(),
        swapped.predict_proba(&x).unwrap(),
    );
    assert_eq!(p.data()[0], q.data()[1]);
    assert_eq!(p.data()[1], q.data()[0]);
}

#[test]
fn untrained_models_sit_at_chance() {
    let (n, k) = (1000, 4);
    let ds = random_dataset(n, 3, 8, k, 7);
    for arch in [Architecture::Xcm, Architecture::MtexCnn] {
        let mut c = small(arch);
        c.n_classes = k;
        let (_, acc) = evaluate(&Model::new(c).unwrap(), &ds).unwrap();
        let p = 1.0 / k as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 4.0 * sd, "{arch}: {acc}");
    }
}

#[test]
fn tsem_at_uwave_scale_is_small_and_fast() {
    let c = ModelConfig::new(Architecture::Tsem, 3, 315, 8);
    assert_eq!(c.window_size(), 63);
    let m = Model::new(c).unwrap();
    assert!(m.param_count() < 500_000, "{}", m.param_count());
    let x = noise(&mut ChaCha8Rng::seed_from_u64(8), &[3, 315]);
    let best = (0..5)
        .map(|_| {
            let t0 = Instant::now();
            m.predict_proba(&x).unwrap();
            t0.elapsed()
        })
        .min()
        .unwrap();
    assert!(best.as_millis() < 50, "{best:?}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = random_dataset(24, 3, 8, 2, 9);
    let mut m = Model::new(small(Architecture::Tsem)).unwrap();
    let before = m.params().params.clone();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 64,
        adam: AdamConfig {
            lr: 0.0,
            ..Default::default()
        },
        patience: None,
        ..Default::default()
    };
    let report = train(&mut m, &ds, None, &cfg).unwrap();
    assert_eq!(m.params().params, before);
    let l0 = report.epochs[0].loss;
    assert!(report.epochs.iter().all(|e| (e.loss - l0).abs() < 1e-12));
}

#[test]
fn training_is_reproducible_and_learns() {
    let ds = random_dataset(40, 3, 8, 2, 10);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        seed: 11,
        patience: None,
        ..Default::default()
    };
    let run = || {
        let mut m = Model::new(small(Architecture::Tsem)).unwrap();
        let r = train(&mut m, &ds, None, &cfg).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert!(r1.epochs.last().unwrap().loss < r1.epochs[0].loss);
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let ds = random_dataset(20, 3, 8, 2, 12);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 4,
        adam: AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        patience: Some(2),
        ..Default::default()
    };
    let mut m = Model::new(small(Architecture::Xcm)).unwrap();
    let r = train(&mut m, &ds, Some(&ds), &cfg).unwrap();
    let best = r.final_stats().val_loss.unwrap();
    assert!(r.epochs.iter().all(|e| e.val_loss.unwrap() >= best));
    let (loss, _) = evaluate(&m, &ds).unwrap();
    assert!((loss - best).abs() < 1e-12);
}

#[test]
fn divergence_names_the_epoch() {
    let ds = random_dataset(8, 3, 8, 2, 13);
    let mut m = Model::new(small(Architecture::MtexCnn)).unwrap();
    m.params_mut()
        .params
        .get_mut("head.dense.b")
        .unwrap()
        .data_mut()[0] = f64::NAN;
    match train(&mut m, &ds, None, &TrainConfig::default()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 0"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let x = noise(&mut ChaCha8Rng::seed_from_u64(14), &[4, 3, 8]);
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let mut m = Model::new(small(arch)).unwrap();
        let ds = random_dataset(8, 3, 8, 2, 15);
        train(
            &mut m,
            &ds,
            None,
            &TrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let path = dir.path().join(format!("{arch}.ckpt"));
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.predict_batch(&x).unwrap(),
            m.predict_batch(&x).unwrap()
        );
    }
}

#[test]
fn checkpoint_errors() {
    let m = Model::new(small(Architecture::Tsem)).unwrap();
    let bytes = to_bytes(&m);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(from_bytes(&bad_magic), Err(Error::Version { .. })));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        from_bytes(&bad_version),
        Err(Error::Version {
            found: 9,
            expected: 1
        })
    ));

    assert!(matches!(
        from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));

    let mut other = small(Architecture::Tsem);
    other.n_features = 4;
    let mut target = Model::new(other).unwrap();
    assert!(matches!(target.load_from(&m), Err(Error::Dimension { .. })));
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let m = Model::new(small(Architecture::Xcm)).unwrap();
    assert!(matches!(
        m.predict_proba(&Tensor::zeros(&[4, 8])),
        Err(Error::Dimension { .. })
    ));
}
