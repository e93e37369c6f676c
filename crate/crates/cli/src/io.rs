use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsem::data::{load_csv, load_uea_text, ChannelStats, MTSDataset};
use tsem::models::{load_model, Model};
use tsem::{Error, Result};

pub const CHECKPOINT: &str = "model.ckpt";
pub const NORMALIZATION: &str = "normalization.json";
pub const TRAIN_REPORT: &str = "train_report.json";

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

impl Part {
    fn dir(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Test => "test",
        }
    }
}

/// Loads a CSV directory or `.ts` file. A directory holding `train/` and
/// `test/` resolves to the requested part. A missing path is a usage error.
pub fn load_dataset(path: &Path, part: Part) -> Result<MTSDataset> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    if path.is_file() {
        return load_uea_text(path);
    }
    if path.join("labels.csv").is_file() {
        return load_csv(path);
    }
    let ts = path.join(format!("{}.ts", part.dir()));
    if ts.is_file() {
        return load_uea_text(&ts);
    }
    let sub = path.join(part.dir());
    if sub.is_dir() {
        return load_dataset(&sub, part);
    }
    Err(Error::Dataset(format!(
        "{} is neither a .ts file, a CSV dataset directory nor a directory with {}/",
        path.display(),
        part.dir()
    )))
}

/// The held-out part next to a generated training directory, if any.
pub fn sibling_test(path: &Path) -> Option<PathBuf> {
    if !path.is_dir() || path.join("labels.csv").is_file() {
        return None;
    }
    [path.join("test"), path.join("test.ts")]
        .into_iter()
        .find(|t| t.exists())
}

pub struct ModelDir {
    pub model: Model,
    pub stats: Option<ChannelStats>,
}

/// A directory written by `train`, or a bare checkpoint file (which then
/// looks for `normalization.json` beside it).
pub fn load_model_dir(path: &Path) -> Result<ModelDir> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "model {} does not exist",
            path.display()
        )));
    }
    let (ckpt, dir) = if path.is_dir() {
        (path.join(CHECKPOINT), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        )
    };
    let model = load_model(&ckpt)?;
    let norm = dir.join(NORMALIZATION);
    let stats = if norm.is_file() {
        Some(read_json(&norm)?)
    } else {
        None
    };
    Ok(ModelDir { model, stats })
}

/// Applies the training normalization and checks the dataset against the model.
pub fn prepare(ds: MTSDataset, md: &ModelDir) -> Result<MTSDataset> {
    let c = md.model.config();
    if ds.n_features() != c.n_features
        || ds.seq_length() != c.seq_length
        || ds.n_classes() != c.n_classes
    {
        return Err(Error::Dataset(format!(
            "dataset is D={}, T={}, K={} but the model expects D={}, T={}, K={}",
            ds.n_features(),
            ds.seq_length(),
            ds.n_classes(),
            c.n_features,
            c.seq_length,
            c.n_classes
        )));
    }
    match &md.stats {
        Some(s) => s.apply(&ds),
        None => Ok(ds),
    }
}

/// Parses `all` or a list such as `0-9,15` into sorted, distinct indices below `n`.
pub fn select_instances(spec: &str, n: usize) -> Result<Vec<usize>> {
    if spec.trim() == "all" {
        return Ok((0..n).collect());
    }
    let bad = || {
        Error::Usage(format!(
            "instance list `{spec}` must be `all` or indices/ranges like `0-9,15`"
        ))
    };
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => {
                let i: usize = part.parse().map_err(|_| bad())?;
                (i, i)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        if hi >= n {
            return Err(Error::Usage(format!(
                "instance {hi} out of range for {n} instances"
            )));
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_lists() {
        assert_eq!(select_instances("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_instances("4,0-2,1", 5).unwrap(), vec![0, 1, 2, 4]);
        assert!(select_instances("0-5", 5).is_err());
        assert!(select_instances("3-1", 5).is_err());
        assert!(select_instances("x", 5).is_err());
    }
}
