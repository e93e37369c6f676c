//! Multivariate time-series datasets.
//!
//! Every instance is a (D, T) tensor: one row per channel, one column per
//! time step. All instances in a dataset share D and T and hold only finite
//! values.

mod csv;
mod normalize;
mod split;
mod synthetic;
mod uea;

use serde::{Deserialize, Serialize};

pub use self::csv::{load_csv, matrix_csv, save_csv};
pub use normalize::{z_normalize, ChannelStats};
pub use split::split;
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use uea::{load_uea_text, parse_uea_text, save_uea_text};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MTSDataset {
    name: String,
    instances: Vec<Tensor>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    stats: Option<ChannelStats>,
}

impl MTSDataset {
    /// Checks the shared-shape, finiteness and label-range invariants.
    pub fn new(
        name: impl Into<String>,
        instances: Vec<Tensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if instances.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} instances but {} labels",
                instances.len(),
                labels.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::Dataset("no classes declared".into()));
        }
        if let Some(first) = instances.first() {
            if first.rank() != 2 {
                return Err(Error::Dataset(format!(
                    "instances must be (D, T), got {:?}",
                    first.shape()
                )));
            }
        }
        for (i, x) in instances.iter().enumerate() {
            if x.shape() != instances[0].shape() {
                return Err(Error::Dataset(format!(
                    "instance {i} has shape {:?}, expected {:?}",
                    x.shape(),
                    instances[0].shape()
                )));
            }
            if !x.is_finite() {
                return Err(Error::Dataset(format!(
                    "instance {i} contains NaN or infinity"
                )));
            }
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= class_names.len())
        {
            return Err(Error::Dataset(format!(
                "instance {i} has label {l} outside [0, {})",
                class_names.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            instances,
            labels,
            class_names,
            stats: None,
        })
    }

    /// Provenance tag, e.g. the problem name or the generator settings.
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.instances.first().map_or(0, |x| x.shape()[0])
    }

    pub fn seq_length(&self) -> usize {
        self.instances.first().map_or(0, |x| x.shape()[1])
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn instance(&self, i: usize) -> &Tensor {
        &self.instances[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn instances(&self) -> &[Tensor] {
        &self.instances
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Normalization statistics applied to this dataset, if any.
    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            stats: self.stats.clone(),
        }
    }

    /// Instances stacked into one (N, D, T) tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.instances[i]).collect();
        Tensor::stack(&items)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub(crate) fn with_instances(
        &self,
        instances: Vec<Tensor>,
        stats: Option<ChannelStats>,
    ) -> Self {
        Self {
            name: self.name.clone(),
            instances,
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            stats,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(v: f64) -> Tensor {
        Tensor::full(&[2, 3], v)
    }

    #[test]
    fn rejects_ragged_and_non_finite() {
        let names = vec!["a".to_string(), "b".to_string()];
        let ragged = vec![inst(0.0), Tensor::zeros(&[2, 4])];
        assert!(MTSDataset::new("x", ragged, vec![0, 1], names.clone()).is_err());
        let nan = vec![inst(0.0), inst(f64::NAN)];
        assert!(MTSDataset::new("x", nan, vec![0, 1], names.clone()).is_err());
        let bad_label = vec![inst(0.0), inst(1.0)];
        assert!(MTSDataset::new("x", bad_label, vec![0, 2], names).is_err());
    }

    #[test]
    fn shape_accessors() {
        let ds = MTSDataset::new(
            "x",
            vec![inst(0.0), inst(1.0)],
            vec![1, 0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(
            (ds.n_features(), ds.seq_length(), ds.n_classes()),
            (2, 3, 2)
        );
        assert_eq!(ds.batch(&[1, 0]).unwrap().shape(), &[2, 2, 3]);
        assert_eq!(ds.class_counts(), vec![1, 1]);
    }
}
