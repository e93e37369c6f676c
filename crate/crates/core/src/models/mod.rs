//! MTEX-CNN, XCM and TSEM classifiers over (D, T) instances.
//!
//! A forward pass records every named activation the attribution methods
//! read. `pre_gap_maps` always has shape (B, F, R, L): F filters over R rows
//! of length L. The head averages each (filter, row) pair over L, so dense
//! input `f * R + r` corresponds to filter f on row r. [`MapGeometry`] says
//! how the R x L grid lines up with the input's D x T grid.

mod checkpoint;
mod forward;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{from_bytes, load_model, save_model, to_bytes, CHECKPOINT_VERSION};
pub use forward::{ForwardPass, Hook, Mode};
pub use train::{evaluate, train, EpochStats, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::ops::upsample_linear_1d;
use crate::tensor::{BatchNormState, Tensor};

/// Upper bound on the window size.
pub const MAX_WINDOW: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    MtexCnn,
    Xcm,
    Tsem,
}

impl Architecture {
    pub const ALL: [Architecture; 3] =
        [Architecture::MtexCnn, Architecture::Xcm, Architecture::Tsem];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::MtexCnn => "mtexcnn",
            Architecture::Xcm => "xcm",
            Architecture::Tsem => "tsem",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| {
                a.id().eq_ignore_ascii_case(s)
                    || (s.eq_ignore_ascii_case("mtex-cnn") && *a == Architecture::MtexCnn)
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture `{s}` (valid: mtexcnn, xcm, tsem)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_features: usize,
    pub seq_length: usize,
    pub n_classes: usize,
    pub window_fraction: f64,
    pub filters_2d: usize,
    pub filters_1d: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(
        architecture: Architecture,
        n_features: usize,
        seq_length: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            architecture,
            n_features,
            seq_length,
            n_classes,
            window_fraction: 0.2,
            filters_2d: 16,
            filters_1d: 16,
            seed: 0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// `clamp(round(window_fraction * T), 1, 500)`.
    pub fn window_size(&self) -> usize {
        ((self.window_fraction * self.seq_length as f64).round() as usize).clamp(1, MAX_WINDOW)
    }

    /// Kernel extent of MTEX-CNN's 1-D stage, which runs at a quarter of the
    /// input resolution.
    pub fn window_size_1d(&self) -> usize {
        self.window_size().div_ceil(4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_features == 0 || self.seq_length == 0 || self.n_classes == 0 {
            return bad("n_features, seq_length and n_classes must be positive".into());
        }
        if self.filters_2d == 0 || self.filters_1d == 0 {
            return bad("filter counts must be positive".into());
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return bad(format!(
                "window_fraction {} outside (0, 1]",
                self.window_fraction
            ));
        }
        if self.window_size() > self.seq_length {
            return bad(format!(
                "window {} exceeds series length {}",
                self.window_size(),
                self.seq_length
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return bad("batch-norm momentum must lie in [0, 1] and eps be positive".into());
        }
        Ok(())
    }

    /// Rows R of the pre-GAP grid.
    pub fn map_rows(&self) -> usize {
        match self.architecture {
            Architecture::MtexCnn => 1,
            Architecture::Xcm => self.n_features + 1,
            Architecture::Tsem => self.n_features,
        }
    }

    /// Length L of the pre-GAP grid.
    pub fn map_len(&self) -> usize {
        match self.architecture {
            Architecture::MtexCnn => self.seq_length.div_ceil(2).div_ceil(2),
            _ => self.seq_length,
        }
    }

    /// Filters F of the pre-GAP grid.
    pub fn map_filters(&self) -> usize {
        self.filters_1d
    }
}

/// How the R x L pre-GAP grid projects onto the D x T input grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowProjection {
    /// One row per input feature.
    Identity,
    /// D feature rows plus one temporal row; the temporal row is shared out
    /// equally over the feature rows.
    FoldTemporalRow,
    /// A single row, replicated over every feature.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeometry {
    pub rows: usize,
    pub len: usize,
    pub features: usize,
    pub steps: usize,
    pub projection: RowProjection,
}

impl MapGeometry {
    /// Projects an R x L grid (flat, row-major) to a D x T tensor. Rows are
    /// combined first, then time is linearly resampled when L != T.
    pub fn project(&self, grid: &[f64]) -> Tensor {
        assert_eq!(grid.len(), self.rows * self.len);
        let (d, l) = (self.features, self.len);
        let mut rows = vec![0.0; d * l];
        match self.projection {
            RowProjection::Identity => rows.copy_from_slice(grid),
            RowProjection::FoldTemporalRow => {
                let shared = &grid[d * l..];
                for r in 0..d {
                    for t in 0..l {
                        rows[r * l + t] = grid[r * l + t] + shared[t] / d as f64;
                    }
                }
            }
            RowProjection::Replicate => {
                for r in 0..d {
                    rows[r * l..][..l].copy_from_slice(grid);
                }
            }
        }
        let out = if l == self.steps {
            rows
        } else {
            let mut up = Vec::with_capacity(d * self.steps);
            for r in 0..d {
                let row = Tensor::vector(&rows[r * l..][..l]);
                up.extend_from_slice(upsample_linear_1d(&row, self.steps).unwrap().data());
            }
            up
        };
        Tensor::new(&[d, self.steps], out).unwrap()
    }
}

/// Named learnable tensors plus batch-norm running state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub norms: BTreeMap<String, BatchNormState>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// FNV-1a over names and little-endian parameter bytes, in name order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.params {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        for (name, s) in &self.norms {
            eat(name.as_bytes());
            for v in s.running_mean.iter().chain(&s.running_var) {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
}

impl Model {
    /// Builds the architecture named in `config` with seeded initial weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: ParamStore::default(),
            rng: &mut rng,
            momentum: config.bn_momentum,
        };
        let (d, w, f2, f1, k) = (
            config.n_features,
            config.window_size(),
            config.filters_2d,
            config.filters_1d,
            config.n_classes,
        );
        match config.architecture {
            Architecture::Xcm => {
                b.conv("b1.conv", &[f2, 1, 1, w]);
                b.norm("b1.bn", f2);
                b.conv("b1.reduce", &[1, f2, 1, 1]);
                b.conv("b2.conv", &[f1, d, w]);
                b.norm("b2.bn", f1);
                b.conv("b2.reduce", &[1, f1, 1]);
                b.conv("head.conv", &[f1, 1, 1, w]);
                b.dense("head.dense", k, f1 * (d + 1));
            }
            Architecture::Tsem => {
                b.conv("b1.conv", &[f2, 1, 1, w]);
                b.norm("b1.bn", f2);
                b.lstm("lstm", d, w);
                b.conv("head.conv", &[f1, f2, 1, w]);
                b.dense("head.dense", k, f1 * d);
            }
            Architecture::MtexCnn => {
                let w1 = config.window_size_1d();
                b.conv("c1.conv", &[f2, 1, 1, w]);
                b.norm("c1.bn", f2);
                b.conv("c2.conv", &[f2, f2, 1, w]);
                b.norm("c2.bn", f2);
                b.conv("c2.reduce", &[1, f2, 1, 1]);
                b.conv("c3.conv", &[f1, d, w1]);
                b.norm("c3.bn", f1);
                b.conv("c4.conv", &[f1, f1, w1]);
                b.dense("head.dense", k, f1);
            }
        }
        Ok(Self {
            config,
            store: b.store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn geometry(&self) -> MapGeometry {
        let c = &self.config;
        MapGeometry {
            rows: c.map_rows(),
            len: c.map_len(),
            features: c.n_features,
            steps: c.seq_length,
            projection: match c.architecture {
                Architecture::MtexCnn => RowProjection::Replicate,
                Architecture::Xcm => RowProjection::FoldTemporalRow,
                Architecture::Tsem => RowProjection::Identity,
            },
        }
    }

    /// Geometry of an arbitrary (B, F, R, L) activation. Rows map onto the
    /// input by count: D rows are features, D + 1 carry a temporal row, a
    /// single row is replicated.
    pub fn geometry_for(&self, rows: usize, len: usize) -> Result<MapGeometry> {
        let d = self.config.n_features;
        let projection = if rows == d {
            RowProjection::Identity
        } else if rows == d + 1 {
            RowProjection::FoldTemporalRow
        } else if rows == 1 {
            RowProjection::Replicate
        } else {
            return Err(Error::dim(
                "activation geometry",
                format!("{rows} rows cannot be aligned with {d} input features"),
            ));
        };
        Ok(MapGeometry {
            rows,
            len,
            features: d,
            steps: self.config.seq_length,
            projection,
        })
    }

    /// Class probabilities for one (D, T) instance.
    pub fn predict_proba(&self, instance: &Tensor) -> Result<Tensor> {
        let pass = self.forward_one(instance, Mode::Eval, None)?;
        Ok(pass.probs_of(0))
    }

    /// Probabilities for a batch (N, D, T); returns (N, K).
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.forward(batch, Mode::Eval, None)?;
        Ok(pass.tape.value(pass.probs).clone())
    }

    /// Predicted class ids for `instances`, evaluated in chunks.
    pub fn predict_classes(&self, instances: &[Tensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(64) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let probs = self.predict_batch(&Tensor::stack(&refs)?)?;
            for r in 0..chunk.len() {
                out.push(argmax(probs.row(r)));
            }
        }
        Ok(out)
    }

    /// Logits of the classifier head applied directly to pre-GAP maps (B, F, R, L).
    pub fn head_logits(&self, maps: &Tensor) -> Result<Tensor> {
        forward::head_only(self, maps)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    momentum: f64,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, shape: &[usize]) {
        let fan_in: usize = shape[1..].iter().product();
        let w = init::fan_in_uniform(shape, fan_in, self.rng);
        let b = init::fan_in_uniform(&[shape[0]], fan_in, self.rng);
        self.store.params.insert(format!("{name}.w"), w);
        self.store.params.insert(format!("{name}.b"), b);
    }

    fn dense(&mut self, name: &str, outputs: usize, inputs: usize) {
        let w = init::fan_in_uniform(&[outputs, inputs], inputs, self.rng);
        let b = init::fan_in_uniform(&[outputs], inputs, self.rng);
        self.store.params.insert(format!("{name}.w"), w);
        self.store.params.insert(format!("{name}.b"), b);
    }

    fn norm(&mut self, name: &str, channels: usize) {
        self.store
            .params
            .insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
        self.store
            .params
            .insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let mut state = BatchNormState::new(channels);
        state.momentum = self.momentum;
        self.store.norms.insert(name.to_string(), state);
    }

    fn lstm(&mut self, name: &str, features: usize, hidden: usize) {
        let limit = (1.0 / hidden as f64).sqrt();
        let w_ih = init::uniform(&[4 * hidden, features], limit, self.rng);
        let w_hh = init::uniform(&[4 * hidden, hidden], limit, self.rng);
        self.store.params.insert(format!("{name}.w_ih"), w_ih);
        self.store.params.insert(format!("{name}.w_hh"), w_hh);
        self.store
            .params
            .insert(format!("{name}.b"), init::lstm_bias(hidden));
    }
}
