use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::faithfulness::Classifier;
use super::stats::chi_square_sf;
use crate::attribution::Explainer;
use crate::data::MTSDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Feature,
    Time,
}

impl Axis {
    fn slices(self, x: &Tensor) -> usize {
        match self {
            Axis::Feature => x.shape()[0],
            Axis::Time => x.shape()[1],
        }
    }
}

/// Permutes the values of slice `s` (a feature row or a time column) in place.
fn permute_slice(x: &mut Tensor, axis: Axis, s: usize, rng: &mut impl Rng) {
    let (d, t) = (x.shape()[0], x.shape()[1]);
    let data = x.data_mut();
    match axis {
        Axis::Feature => data[s * t..(s + 1) * t].shuffle(rng),
        Axis::Time => {
            let mut col: Vec<f64> = (0..d).map(|r| data[r * t + s]).collect();
            col.shuffle(rng);
            for (r, v) in col.into_iter().enumerate() {
                data[r * t + s] = v;
            }
        }
    }
}

/// Randomizes slices 0..=step along `axis`, each by a permutation of its own
/// values. Slices are processed in order, so with equally seeded generators
/// step s extends step s - 1.
pub fn cascade_randomize(
    instance: &Tensor,
    axis: Axis,
    step: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if instance.rank() != 2 {
        return Err(Error::dim(
            "cascade_randomize",
            format!("instance {:?} must be (D, T)", instance.shape()),
        ));
    }
    let n = axis.slices(instance);
    if step >= n {
        return Err(Error::Usage(format!(
            "cascade step {step} out of range for {n} slices"
        )));
    }
    let mut x = instance.clone();
    for s in 0..=step {
        permute_slice(&mut x, axis, s, rng);
    }
    Ok(x)
}

/// Every cascade step of one instance along `axis`.
fn cascade(instance: &Tensor, axis: Axis, rng: &mut impl Rng) -> Vec<Tensor> {
    let mut x = instance.clone();
    (0..axis.slices(instance))
        .map(|s| {
            permute_slice(&mut x, axis, s, rng);
            x.clone()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    /// One of the inputs has zero variance; `r` is then reported as 0.
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Pearson> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(
            "pearson",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Pearson {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Pearson {
        r: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Goodness of fit of the observed correlations against perfect
/// correlation: sum (O_i - 1)^2 / 1 with n - 1 degrees of freedom.
pub fn chi_square(observed: &[f64]) -> Result<ChiSquareTest> {
    if observed.len() < 2 {
        return Err(Error::Usage(
            "chi-square needs at least two observations".into(),
        ));
    }
    let statistic: f64 = observed.iter().map(|o| (o - 1.0).powi(2)).sum();
    let dof = observed.len() - 1;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: chi_square_sf(statistic, dof as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityRecord {
    pub instance: usize,
    pub axis: Axis,
    pub step: usize,
    pub r: f64,
    pub degenerate: bool,
    pub non_causal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityConfig {
    /// A record is non-causal when r reaches this value.
    pub threshold: f64,
    /// Both axis proportions must stay below this to pass.
    pub max_proportion: f64,
    pub seed: u64,
}

impl Default for CausalityConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            max_proportion: 0.10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub method: String,
    pub feature_proportion: f64,
    pub time_proportion: f64,
    pub pass: bool,
    pub chi_square: ChiSquareTest,
    pub records: Vec<CausalityRecord>,
}

/// Accuracy that must be exceeded before explanations are worth testing:
/// chance plus two binomial standard errors.
pub fn chance_bound(n_classes: usize, n: usize) -> f64 {
    let p = 1.0 / n_classes as f64;
    p + 2.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Cascading randomization over both axes of every instance in `ds`. Each
/// explanation targets the class the model predicts for the clean instance.
pub fn causality_report(
    clf: &dyn Classifier,
    explainer: &dyn Explainer,
    ds: &MTSDataset,
    cfg: &CausalityConfig,
) -> Result<CausalityReport> {
    if ds.is_empty() {
        return Err(Error::Dataset(
            "causality needs at least one instance".into(),
        ));
    }
    let k = clf.n_classes();
    let mut predicted = Vec::with_capacity(ds.len());
    for chunk in ds.instances().chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let p = clf.predict_batch(&Tensor::stack(&refs)?)?;
        predicted.extend((0..chunk.len()).map(|r| crate::models::argmax(p.row(r))));
    }
    let correct = predicted
        .iter()
        .zip(ds.labels())
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = correct as f64 / ds.len() as f64;
    let bound = chance_bound(k, ds.len());
    if accuracy <= bound {
        return Err(Error::Untrained {
            accuracy,
            chance: bound,
        });
    }

    let per_instance: Vec<Vec<CausalityRecord>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.instance(i);
            let c = predicted[i];
            let mut inputs = vec![x.clone()];
            let mut tags = Vec::new();
            for (a, axis) in [Axis::Feature, Axis::Time].into_iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(2 * i as u64 + a as u64);
                for (s, xr) in cascade(x, axis, &mut rng).into_iter().enumerate() {
                    inputs.push(xr);
                    tags.push((axis, s));
                }
            }
            let maps = explainer.explain_batch(&inputs, &vec![c; inputs.len()])?;
            let base = maps[0].values.data();
            tags.into_iter()
                .zip(&maps[1..])
                .map(|((axis, step), m)| {
                    let p = pearson(base, m.values.data())?;
                    Ok(CausalityRecord {
                        instance: i,
                        axis,
                        step,
                        r: p.r,
                        degenerate: p.degenerate,
                        non_causal: p.r >= cfg.threshold,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<CausalityRecord> = per_instance.into_iter().flatten().collect();

    let proportion = |axis: Axis| {
        let of_axis: Vec<&CausalityRecord> = records.iter().filter(|r| r.axis == axis).collect();
        of_axis.iter().filter(|r| r.non_causal).count() as f64 / of_axis.len() as f64
    };
    let (feature_proportion, time_proportion) = (proportion(Axis::Feature), proportion(Axis::Time));
    let rs: Vec<f64> = records.iter().map(|r| r.r).collect();
    Ok(CausalityReport {
        method: explainer.id(),
        feature_proportion,
        time_proportion,
        pass: feature_proportion < cfg.max_proportion && time_proportion < cfg.max_proportion,
        chi_square: chi_square(&rs)?,
        records,
    })
}
