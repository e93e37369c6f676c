use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    /// One-vs-rest accumulation where each instance is scored once, against
    /// its true class: a correct prediction is a true positive, a wrong one a
    /// false negative. Accuracy is then the fraction predicted correctly.
    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Usage(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut c = Self::default();
        for (p, t) in predicted.iter().zip(truth) {
            if p == t {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// (TP + TN) / (TP + FP + TN + FN).
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::Usage("accuracy of an empty confusion table".into()));
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(accuracy(&ConfusionCounts::new(3, 1, 5, 1)).unwrap(), 0.8);
        assert_eq!(accuracy(&ConfusionCounts::new(4, 0, 7, 0)).unwrap(), 1.0);
        assert!(accuracy(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn predictions_reduce_to_fraction_correct() {
        let c = ConfusionCounts::from_predictions(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap();
        assert_eq!(accuracy(&c).unwrap(), 0.75);
    }
}
