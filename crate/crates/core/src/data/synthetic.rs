use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MTSDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bump-gesture generator. Class k puts a Gaussian bump on channel `k mod D`
/// centred at `T (1 + 2 floor(k/D)) / (2 ceil(K/D))`; the bump is added only
/// within two widths of its centre, so the ground-truth region is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_features: usize,
    pub seq_length: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub bump_width: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_features: 3,
            seq_length: 64,
            n_classes: 6,
            n_per_class: 100,
            bump_width: 3.0,
            amplitude: 2.0,
            noise: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_features == 0
            || self.seq_length == 0
            || self.n_classes == 0
            || self.n_per_class == 0
        {
            return bad("D, T, K and n_per_class must be positive".into());
        }
        if self.bump_width.is_nan() || self.bump_width <= 0.0 || !self.amplitude.is_finite() || self.noise.is_nan() || self.noise < 0.0 {
            return bad("bump width must be positive, amplitude finite, noise non-negative".into());
        }
        for k in 0..self.n_classes {
            let (lo, hi) = self.window(k);
            if lo < 0.0 || hi > (self.seq_length - 1) as f64 {
                return bad(format!(
                    "class {k}: bump window [{lo}, {hi}] falls outside [0, {})",
                    self.seq_length
                ));
            }
        }
        Ok(())
    }

    fn slots(&self) -> usize {
        self.n_classes.div_ceil(self.n_features)
    }

    pub fn channel(&self, class: usize) -> usize {
        class % self.n_features
    }

    pub fn center(&self, class: usize) -> f64 {
        let slot = (class / self.n_features) as f64;
        self.seq_length as f64 * (1.0 + 2.0 * slot) / (2.0 * self.slots() as f64)
    }

    fn window(&self, class: usize) -> (f64, f64) {
        let c = self.center(class);
        (c - 2.0 * self.bump_width, c + 2.0 * self.bump_width)
    }

    /// Time steps covered by the bump of `class`.
    pub fn time_range(&self, class: usize) -> std::ops::RangeInclusive<usize> {
        let (lo, hi) = self.window(class);
        (lo.ceil().max(0.0) as usize)..=(hi.floor() as usize).min(self.seq_length - 1)
    }

    /// (D, T) indicator of the ground-truth region of `class`.
    pub fn region(&self, class: usize) -> Tensor {
        let mut m = Tensor::zeros(&[self.n_features, self.seq_length]);
        let d = self.channel(class);
        for t in self.time_range(class) {
            m.set(&[d, t], 1.0);
        }
        m
    }

    fn bump(&self, class: usize, t: usize) -> f64 {
        let c = self.center(class);
        let z = (t as f64 - c) / self.bump_width;
        self.amplitude * (-0.5 * z * z).exp()
    }
}

/// Balanced dataset with classes interleaved: instance i has label i mod K.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MTSDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (d, t) = (spec.n_features, spec.seq_length);
    let mut instances = Vec::with_capacity(spec.n_per_class * spec.n_classes);
    let mut labels = Vec::with_capacity(instances.capacity());
    for _ in 0..spec.n_per_class {
        for k in 0..spec.n_classes {
            let mut x = Tensor::zeros(&[d, t]);
            for v in x.data_mut() {
                *v = noise.sample(&mut rng);
            }
            let ch = spec.channel(k);
            for step in spec.time_range(k) {
                let cur = x.get(&[ch, step]);
                x.set(&[ch, step], cur + spec.bump(k, step));
            }
            instances.push(x);
            labels.push(k);
        }
    }
    let name = format!(
        "synthetic-D{}-T{}-K{}-seed{}",
        spec.n_features, spec.seq_length, spec.n_classes, spec.seed
    );
    let class_names = (0..spec.n_classes).map(|k| format!("bump{k}")).collect();
    MTSDataset::new(name, instances, labels, class_names)
}
