use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsem::data::{
    generate_synthetic, load_csv, load_uea_text, save_csv, save_uea_text, split, z_normalize,
    ChannelStats, MTSDataset, SyntheticSpec,
};
use tsem::Tensor;

fn random_dataset(n: usize, d: usize, t: usize, k: usize, seed: u64) -> MTSDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = (0..n)
        .map(|_| {
            let v = (0..d * t)
                .map(|i| rng.random_range(-5.0..5.0) * (1.0 + (i % d) as f64) + 3.0)
                .collect();
            Tensor::new(&[d, t], v).unwrap()
        })
        .collect();
    let labels = (0..n).map(|i| i % k).collect();
    MTSDataset::new(
        "rand",
        xs,
        labels,
        (0..k).map(|c| format!("c{c}")).collect(),
    )
    .unwrap()
}

fn channel_moments(ds: &MTSDataset, ch: usize) -> (f64, f64) {
    let vals: Vec<f64> = ds
        .instances()
        .iter()
        .flat_map(|x| x.row(ch).to_vec())
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn both_formats_round_trip_bit_exactly(seed in any::<u64>(), n in 1usize..6, d in 1usize..4, t in 1usize..7) {
        let ds = random_dataset(n, d, t, n.min(3), seed);
        let dir = tempfile::tempdir().unwrap();
        save_csv(&ds, dir.path().join("csv")).unwrap();
        let back = load_csv(dir.path().join("csv")).unwrap();
        prop_assert_eq!(back.instances(), ds.instances());
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.class_names(), ds.class_names());

        let ts = dir.path().join("x.ts");
        save_uea_text(&ds, &ts).unwrap();
        let back = load_uea_text(&ts).unwrap();
        prop_assert_eq!(back.instances(), ds.instances());
        prop_assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn z_normalize_is_idempotent(seed in any::<u64>()) {
        let (once, _) = z_normalize(&random_dataset(10, 2, 9, 2, seed)).unwrap();
        let (twice, _) = z_normalize(&once).unwrap();
        for (a, b) in once.instances().iter().zip(twice.instances()) {
            prop_assert!(a.max_abs_diff(b) < 1e-6);
        }
    }
}

#[test]
fn z_normalize_standardizes_train_and_reuses_stats() {
    let ds = random_dataset(30, 3, 20, 3, 1);
    let (train, test) = split(&ds, 0.5, 2).unwrap();
    let (normed, stats) = z_normalize(&train).unwrap();
    for ch in 0..3 {
        let (m, s) = channel_moments(&normed, ch);
        assert!(m.abs() < 1e-9, "{m}");
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
    let applied = stats.apply(&test).unwrap();
    let refit = ChannelStats::fit(&train).unwrap();
    assert_eq!(refit, stats);
    for (raw, out) in test.instances().iter().zip(applied.instances()) {
        for ch in 0..3 {
            for (r, o) in raw.row(ch).iter().zip(out.row(ch)) {
                assert_eq!(*o, (r - stats.mean[ch]) / stats.std[ch]);
            }
        }
    }
}

#[test]
fn class_mean_peaks_at_the_specified_centre() {
    let spec = SyntheticSpec {
        n_per_class: 1000 / 6 + 1,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    for k in 0..spec.n_classes {
        let ch = spec.channel(k);
        let mut mean = vec![0.0; spec.seq_length];
        let mut n = 0.0;
        for i in (0..ds.len()).filter(|&i| ds.label(i) == k) {
            for (m, v) in mean.iter_mut().zip(ds.instance(i).row(ch)) {
                *m += v;
            }
            n += 1.0;
        }
        let peak = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(
            (peak as f64 - spec.center(k)).abs() <= 1.0,
            "class {k}: peak {peak} vs {}",
            spec.center(k)
        );
        assert!(n >= 166.0);
    }
}

#[test]
fn noiseless_data_is_nearest_centroid_separable() {
    let spec = SyntheticSpec {
        noise: 0.0,
        n_per_class: 5,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let (d, t) = (spec.n_features, spec.seq_length);
    let mut centroids = vec![vec![0.0; d * t]; spec.n_classes];
    for (x, &y) in ds.instances().iter().zip(ds.labels()) {
        for (c, v) in centroids[y].iter_mut().zip(x.data()) {
            *c += v / spec.n_per_class as f64;
        }
    }
    for (x, &y) in ds.instances().iter().zip(ds.labels()) {
        let dist = |c: &Vec<f64>| {
            c.iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let best = (0..spec.n_classes)
            .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
            .unwrap();
        assert_eq!(best, y);
    }
}

#[test]
fn ground_truth_region_is_about_ten_percent() {
    let spec = SyntheticSpec::default();
    for k in 0..spec.n_classes {
        let cells = spec.region(k).sum();
        let frac = cells / (spec.n_features * spec.seq_length) as f64;
        assert!((0.05..=0.15).contains(&frac), "{frac}");
    }
}

#[test]
fn uwave_train_file_has_the_expected_layout() {
    let Ok(dir) = std::env::var("TSEM_UWAVE_DIR") else {
        eprintln!("TSEM_UWAVE_DIR not set, skipping");
        return;
    };
    let ds =
        load_uea_text(std::path::Path::new(&dir).join("UWaveGestureLibrary_TRAIN.ts")).unwrap();
    assert_eq!(
        (ds.len(), ds.n_features(), ds.seq_length(), ds.n_classes()),
        (120, 3, 315, 8)
    );
}
