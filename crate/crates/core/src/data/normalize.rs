use serde::{Deserialize, Serialize};

use super::MTSDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels whose standard deviation falls below this are only centred.
pub const STD_EPS: f64 = 1e-8;

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over every instance and time step of `ds`.
    pub fn fit(ds: &MTSDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Dataset(
                "cannot fit normalization on an empty dataset".into(),
            ));
        }
        let (d, t) = (ds.n_features(), ds.seq_length());
        let n = (ds.len() * t) as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let m = ds
                .instances()
                .iter()
                .map(|x| x.row(c).iter().sum::<f64>())
                .sum::<f64>()
                / n;
            let var = ds
                .instances()
                .iter()
                .map(|x| x.row(c).iter().map(|v| (v - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / n;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn apply_instance(&self, x: &Tensor) -> Tensor {
        let t = x.shape()[1];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / t;
            *v = (*v - self.mean[c]) / self.std[c].max(STD_EPS);
        }
        out
    }

    /// Applies these statistics verbatim, e.g. train-split statistics to test data.
    pub fn apply(&self, ds: &MTSDataset) -> Result<MTSDataset> {
        if ds.n_features() != self.mean.len() {
            return Err(Error::dim(
                "normalize",
                format!(
                    "statistics for {} channels, dataset has {}",
                    self.mean.len(),
                    ds.n_features()
                ),
            ));
        }
        let xs = ds
            .instances()
            .iter()
            .map(|x| self.apply_instance(x))
            .collect();
        Ok(ds.with_instances(xs, Some(self.clone())))
    }
}

/// Fits per-channel statistics on `train` and returns the normalized copy.
pub fn z_normalize(train: &MTSDataset) -> Result<(MTSDataset, ChannelStats)> {
    let stats = ChannelStats::fit(train)?;
    Ok((stats.apply(train)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: Vec<Vec<Vec<f64>>>) -> MTSDataset {
        let n = rows.len();
        let xs = rows.iter().map(|r| Tensor::from_rows(r).unwrap()).collect();
        MTSDataset::new("t", xs, vec![0; n], vec!["a".into()]).unwrap()
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let d = ds(vec![
            vec![vec![3.0, 3.0], vec![1.0, 2.0]],
            vec![vec![3.0, 3.0], vec![5.0, 0.0]],
        ]);
        let (n, stats) = z_normalize(&d).unwrap();
        assert_eq!(stats.std[0], 0.0);
        for x in n.instances() {
            assert_eq!(x.row(0), &[0.0, 0.0]);
        }
    }

    #[test]
    fn normalized_data_is_unchanged() {
        let d = ds(vec![vec![vec![1.0, -1.0]], vec![vec![-1.0, 1.0]]]);
        let (n, _) = z_normalize(&d).unwrap();
        for (a, b) in n.instances().iter().zip(d.instances()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }
}
