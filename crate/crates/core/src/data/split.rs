use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MTSDataset;
use crate::error::{Error, Result};

/// Stratified, seeded split. Each class contributes `round(ratio * n_c)`
/// instances to the first part; both parts keep the original order.
pub fn split(ds: &MTSDataset, ratio: f64, seed: u64) -> Result<(MTSDataset, MTSDataset)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.len()];
    for class in 0..ds.n_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
        members.shuffle(&mut rng);
        let take = (ratio * members.len() as f64).round() as usize;
        for &i in &members[..take] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| in_train[i]);
    Ok((ds.subset(&train), ds.subset(&test)))
}
