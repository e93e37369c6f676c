use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, Mode, Model, ParamStore};
use crate::data::MTSDataset;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many epochs without improvement of the monitored loss
    /// (validation loss when a validation set is given, training loss
    /// otherwise) and restore the best parameters. `None` trains every epoch.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            patience: Some(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
    pub checksum: String,
}

/// Wall time is excluded: two runs with the same seed compare equal.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
            && self.checksum == other.checksum
    }
}

impl TrainReport {
    pub fn final_stats(&self) -> &EpochStats {
        &self.epochs[self.best_epoch]
    }
}

fn check_dims(model: &Model, ds: &MTSDataset) -> Result<()> {
    let c = model.config();
    if ds.n_features() != c.n_features
        || ds.seq_length() != c.seq_length
        || ds.n_classes() != c.n_classes
    {
        return Err(Error::dim(
            "train",
            format!(
                "dataset is D={}, T={}, K={} but the model expects D={}, T={}, K={}",
                ds.n_features(),
                ds.seq_length(),
                ds.n_classes(),
                c.n_features,
                c.seq_length,
                c.n_classes
            ),
        ));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy in evaluation mode.
pub fn evaluate(model: &Model, ds: &MTSDataset) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(64) {
        let probs = model.predict_batch(&ds.batch(chunk)?)?;
        for (r, &i) in chunk.iter().enumerate() {
            let row = probs.row(r);
            loss -= row[ds.label(i)].max(f64::MIN_POSITIVE).ln();
            correct += (argmax(row) == ds.label(i)) as usize;
        }
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch Adam on cross-entropy. Deterministic for a given seed.
pub fn train(
    model: &mut Model,
    train_set: &MTSDataset,
    validation: Option<&MTSDataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_dims(model, train_set)?;
    if let Some(v) = validation {
        check_dims(model, v)?;
    }
    if train_set.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "training needs data, a positive batch size and epochs".into(),
        ));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let mut pass = model.forward(&batch, Mode::Train, None)?;
            let loss = pass.tape.cross_entropy(pass.logits, &labels)?;
            let value = pass.tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite in epoch {epoch}"
                )));
            }
            loss_sum += value * chunk.len() as f64;
            let logits = pass.tape.value(pass.logits);
            for (r, &l) in labels.iter().enumerate() {
                correct += (argmax(logits.outer(r).data()) == l) as usize;
            }

            let grads = pass.tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> = pass
                .params()
                .iter()
                .map(|(_, v)| grads.get_or_zeros(&pass.tape, *v))
                .collect();
            let store = model.params_mut();
            let names: Vec<&String> = pass.params().iter().map(|(n, _)| n).collect();
            let mut targets: Vec<&mut Tensor> = store
                .params
                .iter_mut()
                .filter(|(n, _)| names.contains(n))
                .map(|(_, t)| t)
                .collect();
            // BTreeMap iteration is name-ordered; align the gradients the same way.
            let mut ordered: Vec<(&String, &Tensor)> =
                names.iter().copied().zip(&grad_tensors).collect();
            ordered.sort_by(|a, b| a.0.cmp(b.0));
            let grad_refs: Vec<&Tensor> = ordered.iter().map(|(_, g)| *g).collect();
            adam_step(&mut targets, &grad_refs, &mut adam, &cfg.adam);
            for (name, mean, var, count) in pass.norm_stats() {
                store.norms.get_mut(name).unwrap().update(mean, var, *count);
            }
        }
        let n = train_set.len() as f64;
        let mut stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss: None,
            val_accuracy: None,
        };
        if let Some(v) = validation {
            let (l, a) = evaluate(model, v)?;
            stats.val_loss = Some(l);
            stats.val_accuracy = Some(a);
        }
        let monitored = stats.val_loss.unwrap_or(stats.loss);
        epochs.push(stats);

        if let Some(patience) = cfg.patience {
            let improved = best.as_ref().is_none_or(|(b, _, _)| monitored < *b);
            if improved {
                best = Some((monitored, epoch, model.params().clone()));
            } else if epoch - best.as_ref().unwrap().1 >= patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, store)) => {
            *model.params_mut() = store;
            e
        }
        None => epochs.len() - 1,
    };
    Ok(TrainReport {
        epochs,
        best_epoch,
        stopped_early,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checksum: format!("{:016x}", model.params().checksum()),
    })
}
