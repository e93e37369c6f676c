use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// Anything that maps a batch (N, D, T) to class probabilities (N, K).
pub trait Classifier: Sync {
    fn n_classes(&self) -> usize;

    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor>;

    /// Probabilities of class `c` for each instance, in chunks of 64.
    fn class_probs(&self, instances: &[Tensor], c: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(64) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let p = self.predict_batch(&Tensor::stack(&refs)?)?;
            out.extend((0..chunk.len()).map(|r| p.row(r)[c]));
        }
        Ok(out)
    }
}

impl Classifier for Model {
    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
        Model::predict_batch(self, batch)
    }
}

/// Probability of the explained class before (`y`) and after (`o`) masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessSample {
    pub y: f64,
    pub o: f64,
}

/// Mean of max(0, Y - O) / Y in percent. Samples with Y = 0 carry no
/// information and are skipped; an empty remainder gives 0.
pub fn average_drop(samples: &[FaithfulnessSample]) -> f64 {
    let used: Vec<f64> = samples
        .iter()
        .filter(|s| s.y > 0.0)
        .map(|s| (s.y - s.o).max(0.0) / s.y)
        .collect();
    if used.is_empty() {
        return 0.0;
    }
    100.0 * used.iter().sum::<f64>() / used.len() as f64
}

/// Percentage of samples whose probability strictly increases under masking.
pub fn average_increase(samples: &[FaithfulnessSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    100.0 * samples.iter().filter(|s| s.y < s.o).count() as f64 / samples.len() as f64
}

fn check_map(op: &'static str, instance: &Tensor, map: &Tensor) -> Result<()> {
    if instance.shape() != map.shape() {
        return Err(Error::dim(
            op,
            format!(
                "map {:?} does not match instance {:?}",
                map.shape(),
                instance.shape()
            ),
        ));
    }
    Ok(())
}

/// The instance scaled cell by cell by its min-max normalized map. A flat
/// map normalizes to zeros.
pub fn mask_by_explanation(instance: &Tensor, map: &Tensor) -> Result<Tensor> {
    check_map("mask_by_explanation", instance, map)?;
    let (lo, hi) = (map.min(), map.max());
    let data = instance
        .data()
        .iter()
        .zip(map.data())
        .map(|(x, m)| {
            if hi > lo {
                x * ((m - lo) / (hi - lo))
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(instance.shape(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub auc: f64,
}

pub const DEFAULT_STEP_FRACTION: f64 = 0.05;

/// Trapezoid rule over (fraction, prob).
pub fn trapezoid(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fraction - w[0].fraction) * (w[0].prob + w[1].prob) / 2.0)
        .sum()
}

/// Cell indices from most to least salient; ties keep row-major order.
fn saliency_order(map: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.numel()).collect();
    idx.sort_by(|&a, &b| map.data()[b].total_cmp(&map.data()[a]));
    idx
}

fn curve(
    op: &'static str,
    clf: &dyn Classifier,
    instance: &Tensor,
    class: usize,
    map: &Tensor,
    step_fraction: f64,
    insert: bool,
) -> Result<Curve> {
    check_map(op, instance, map)?;
    if !(step_fraction > 0.0 && step_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "step fraction {step_fraction} outside (0, 0.5]"
        )));
    }
    if class >= clf.n_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            n_classes: clf.n_classes(),
        });
    }
    let n = instance.numel();
    let chunk = ((step_fraction * n as f64).ceil() as usize).max(1);
    let order = saliency_order(map);
    let mut current = if insert {
        Tensor::zeros(instance.shape())
    } else {
        instance.clone()
    };
    let mut states = vec![current.clone()];
    let mut fractions = vec![0.0];
    for (i, cells) in order.chunks(chunk).enumerate() {
        for &c in cells {
            current.data_mut()[c] = if insert { instance.data()[c] } else { 0.0 };
        }
        states.push(current.clone());
        fractions.push(((i * chunk + cells.len()) as f64 / n as f64).min(1.0));
    }
    let probs = clf.class_probs(&states, class)?;
    if let Some(step) = probs.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!(
            "{op}: probability is not finite at step {step}"
        )));
    }
    let points: Vec<CurvePoint> = fractions
        .into_iter()
        .zip(probs)
        .map(|(fraction, prob)| CurvePoint { fraction, prob })
        .collect();
    let auc = trapezoid(&points);
    Ok(Curve { points, auc })
}

/// Zero the most salient cells batch by batch and track the class probability.
pub fn deletion_curve(
    clf: &dyn Classifier,
    instance: &Tensor,
    class: usize,
    map: &Tensor,
    step_fraction: f64,
) -> Result<Curve> {
    curve(
        "deletion_curve",
        clf,
        instance,
        class,
        map,
        step_fraction,
        false,
    )
}

/// Start from an all-zero instance and restore the most salient cells first.
pub fn insertion_curve(
    clf: &dyn Classifier,
    instance: &Tensor,
    class: usize,
    map: &Tensor,
    step_fraction: f64,
) -> Result<Curve> {
    curve(
        "insertion_curve",
        clf,
        instance,
        class,
        map,
        step_fraction,
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_level_values() {
        let s = [
            FaithfulnessSample { y: 0.8, o: 0.4 },
            FaithfulnessSample { y: 0.5, o: 0.7 },
        ];
        assert_eq!(average_drop(&s[..1]), 50.0);
        assert!((average_drop(&s) - 25.0).abs() < 1e-12);
        assert_eq!(average_increase(&s), 50.0);
    }

    #[test]
    fn equal_probabilities_count_for_neither() {
        let s = [FaithfulnessSample { y: 0.5, o: 0.5 }];
        assert_eq!(average_drop(&s), 0.0);
        assert_eq!(average_increase(&s), 0.0);
    }

    #[test]
    fn trapezoid_of_a_straight_line() {
        let pts = [0.0, 0.5, 1.0].map(|f| CurvePoint {
            fraction: f,
            prob: 1.0 - f,
        });
        assert_eq!(trapezoid(&pts), 0.5);
    }

    #[test]
    fn ties_keep_row_major_order() {
        let m = Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(saliency_order(&m), vec![1, 2, 0, 3]);
    }
}
