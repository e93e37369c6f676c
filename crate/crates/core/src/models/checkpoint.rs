//! Binary checkpoint container.
//!
//! ```text
//! magic      4 bytes  "TSEM"
//! version    u32 LE   CHECKPOINT_VERSION
//! config     u32 LE length, then that many bytes of ModelConfig JSON
//! blocks     u32 LE count, then per block:
//!              u32 LE name length, name bytes (UTF-8)
//!              u32 LE rank, rank x u64 LE extents
//!              product(extents) x f64 LE values
//! ```
//!
//! Parameters are stored under their own names; batch-norm running state as
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TSEM";

fn blocks(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params()
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for (name, s) in &model.params().norms {
        out.push((
            format!("{name}.running_mean"),
            Tensor::vector(&s.running_mean),
        ));
        out.push((
            format!("{name}.running_var"),
            Tensor::vector(&s.running_var),
        ));
    }
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let blocks = blocks(model);
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Version {
            found: u32::from_le_bytes(magic.try_into().unwrap()),
            expected: CHECKPOINT_VERSION,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut model = Model::new(config)?;
    let count = r.u32("block count")? as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32("block name length")? as usize;
        let name = String::from_utf8(r.take(n, "block name")?.to_vec())
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("block too large".into()))?,
            &name,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    load_blocks(&mut model, loaded)?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

fn load_blocks(model: &mut Model, blocks: Vec<(String, Tensor)>) -> Result<()> {
    let expected = self::blocks(model);
    if expected.len() != blocks.len() {
        return Err(Error::Checkpoint(format!(
            "{} blocks, the configured architecture has {}",
            blocks.len(),
            expected.len()
        )));
    }
    let store = model.params_mut();
    for (name, t) in blocks {
        if let Some(p) = store.params.get_mut(&name) {
            if p.shape() != t.shape() {
                return Err(Error::dim(
                    "load_model",
                    format!(
                        "`{name}` is {:?} in the file, {:?} in the model",
                        t.shape(),
                        p.shape()
                    ),
                ));
            }
            *p = t;
            continue;
        }
        let (layer, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("unexpected block `{name}`")))?;
        let state = store
            .norms
            .get_mut(layer)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected block `{name}`")))?;
        let slot = match field {
            "running_mean" => &mut state.running_mean,
            "running_var" => &mut state.running_var,
            _ => return Err(Error::Checkpoint(format!("unexpected block `{name}`"))),
        };
        if slot.len() != t.numel() {
            return Err(Error::dim(
                "load_model",
                format!("`{name}` has {} values, expected {}", t.numel(), slot.len()),
            ));
        }
        *slot = t.into_data();
    }
    Ok(())
}

impl Model {
    /// Copies the parameters of `other` into this model. Fails with a
    /// dimension error when the configurations disagree.
    pub fn load_from(&mut self, other: &Model) -> Result<()> {
        if self.config != other.config {
            let (a, b) = (&self.config, &other.config);
            return Err(Error::dim(
                "load_model",
                format!(
                    "checkpoint is {} D={} T={} K={}, model is {} D={} T={} K={}",
                    b.architecture,
                    b.n_features,
                    b.seq_length,
                    b.n_classes,
                    a.architecture,
                    a.n_features,
                    a.seq_length,
                    a.n_classes
                ),
            ));
        }
        self.store = other.store.clone();
        Ok(())
    }
}
