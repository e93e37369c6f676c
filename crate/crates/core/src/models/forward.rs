use std::collections::HashMap;

use super::{Architecture, MapGeometry, Model};
use crate::error::{Error, Result};
use crate::tensor::{NormMode, Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Parameters are tape leaves and batch norm uses batch statistics.
    Train,
    /// Parameters are constants, batch norm uses running statistics and the
    /// input is a leaf, so gradients with respect to activations are available.
    Eval,
}

/// Called with each named activation as it is produced. Returning a tensor
/// of the same shape replaces the activation for the rest of the pass.
pub type Hook<'a> = &'a mut dyn FnMut(&str, &Tensor) -> Option<Tensor>;

/// One forward evaluation and its activation registry.
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub logits: Var,
    pub probs: Var,
    registry: Vec<(&'static str, Var)>,
    params: Vec<(String, Var)>,
    norm_stats: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
    geometry: MapGeometry,
}

impl ForwardPass {
    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.registry.iter().map(|(k, _)| *k)
    }

    pub fn activation(&self, key: &str) -> Result<Var> {
        self.registry
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownActivation(key.to_string()))
    }

    pub fn value(&self, key: &str) -> Result<&Tensor> {
        Ok(self.tape.value(self.activation(key)?))
    }

    /// Probabilities of batch item `i`.
    pub fn probs_of(&self, i: usize) -> Tensor {
        self.tape.value(self.probs).outer(i)
    }

    pub fn logits_of(&self, i: usize) -> Tensor {
        self.tape.value(self.logits).outer(i)
    }

    pub fn geometry(&self) -> MapGeometry {
        self.geometry
    }

    pub(crate) fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub(crate) fn norm_stats(&self) -> &[(String, Vec<f64>, Vec<f64>, usize)] {
        &self.norm_stats
    }
}

struct Ctx<'m, 'h> {
    tape: Tape,
    model: &'m Model,
    mode: Mode,
    hook: Option<Hook<'h>>,
    cache: HashMap<String, Var>,
    params: Vec<(String, Var)>,
    norm_stats: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
    registry: Vec<(&'static str, Var)>,
}

impl<'m, 'h> Ctx<'m, 'h> {
    fn new(model: &'m Model, mode: Mode, hook: Option<Hook<'h>>) -> Self {
        Self {
            tape: Tape::new(),
            model,
            mode,
            hook,
            cache: HashMap::new(),
            params: Vec::new(),
            norm_stats: Vec::new(),
            registry: Vec::new(),
        }
    }

    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.cache.get(name) {
            return v;
        }
        let t = self.model.store.get(name).clone();
        let v = match self.mode {
            Mode::Train => {
                let v = self.tape.leaf(t);
                self.params.push((name.to_string(), v));
                v
            }
            Mode::Eval => self.tape.constant(t),
        };
        self.cache.insert(name.to_string(), v);
        v
    }

    fn conv2d(
        &mut self,
        x: Var,
        layer: &str,
        time_pad: Padding,
        time_stride: usize,
    ) -> Result<Var> {
        let (w, b) = (self.p(&format!("{layer}.w")), self.p(&format!("{layer}.b")));
        self.tape
            .conv2d(x, w, Some(b), [Padding::NONE, time_pad], [1, time_stride])
    }

    fn conv1d(&mut self, x: Var, layer: &str, pad: Padding) -> Result<Var> {
        let (w, b) = (self.p(&format!("{layer}.w")), self.p(&format!("{layer}.b")));
        self.tape.conv1d(x, w, Some(b), pad, 1)
    }

    fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let gamma = self.p(&format!("{layer}.gamma"));
        let beta = self.p(&format!("{layer}.beta"));
        let state = &self.model.store.norms[layer];
        let mode = match self.mode {
            Mode::Train => NormMode::Train,
            Mode::Eval => NormMode::Infer,
        };
        let eps = self.model.config.bn_eps;
        let (y, stats) = self.tape.batch_norm(
            x,
            gamma,
            beta,
            1,
            mode,
            (&state.running_mean, &state.running_var),
            eps,
        )?;
        if let Some((mean, var)) = stats {
            let count = self.tape.value(x).numel() / mean.len();
            self.norm_stats.push((layer.to_string(), mean, var, count));
        }
        Ok(y)
    }

    fn record(&mut self, key: &'static str, v: Var) -> Result<Var> {
        let mut v = v;
        if let Some(hook) = self.hook.as_mut() {
            if let Some(t) = hook(key, self.tape.value(v)) {
                if t.shape() != self.tape.shape(v) {
                    return Err(Error::dim(
                        "forward hook",
                        format!(
                            "`{key}` replacement {:?} vs activation {:?}",
                            t.shape(),
                            self.tape.shape(v)
                        ),
                    ));
                }
                v = self.tape.constant(t);
            }
        }
        self.registry.push((key, v));
        Ok(v)
    }

    /// Per-row GAP over L, flatten to (B, F * R), dense.
    fn head(&mut self, maps: Var) -> Result<Var> {
        let shape = self.tape.shape(maps).to_vec();
        let pooled = self.tape.mean_trailing(maps, 3)?;
        let flat = self
            .tape
            .reshape(pooled, &[shape[0], shape[1] * shape[2]])?;
        let (w, b) = (self.p("head.dense.w"), self.p("head.dense.b"));
        self.tape.linear(flat, w, b)
    }

    fn finish(mut self, input: Var, pre_gap: Var) -> Result<ForwardPass> {
        let logits = self.head(pre_gap)?;
        let logits = self.record("logits", logits)?;
        let probs = self.tape.softmax(logits);
        let probs = self.record("probs", probs)?;
        Ok(ForwardPass {
            tape: self.tape,
            input,
            logits,
            probs,
            registry: self.registry,
            params: self.params,
            norm_stats: self.norm_stats,
            geometry: self.model.geometry(),
        })
    }
}

impl Model {
    /// Runs the network on a batch (B, D, T).
    pub fn forward(
        &self,
        batch: &Tensor,
        mode: Mode,
        hook: Option<Hook<'_>>,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let s = batch.shape();
        if s.len() != 3 || s[1] != c.n_features || s[2] != c.seq_length {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {s:?} does not match (B, {}, {}) expected by the model",
                    c.n_features, c.seq_length
                ),
            ));
        }
        let (b, d, t) = (s[0], s[1], s[2]);
        let w = c.window_size();
        let mut cx = Ctx::new(self, mode, hook);
        let x = match mode {
            Mode::Train => cx.tape.constant(batch.clone()),
            Mode::Eval => cx.tape.leaf(batch.clone()),
        };
        let same = Padding::same(w);
        let x4 = cx.tape.reshape(x, &[b, 1, d, t])?;

        let pre_gap = match c.architecture {
            Architecture::Xcm => {
                let b1 = cx.conv2d(x4, "b1.conv", same, 1)?;
                let b1 = cx.bn(b1, "b1.bn")?;
                let b1 = cx.tape.relu(b1);
                let b1 = cx.record("branch1_maps", b1)?;
                let r1 = cx.conv2d(b1, "b1.reduce", Padding::NONE, 1)?;

                let b2 = cx.conv1d(x, "b2.conv", same)?;
                let b2 = cx.bn(b2, "b2.bn")?;
                let b2 = cx.tape.relu(b2);
                let r2 = cx.conv1d(b2, "b2.reduce", Padding::NONE)?;
                let tv = cx.tape.reshape(r2, &[b, t])?;
                let tv = cx.record("temporal_vector", tv)?;
                let tv = cx.tape.reshape(tv, &[b, 1, 1, t])?;

                let cat = cx.tape.concat(&[r1, tv], 2)?;
                let cat = cx.record("concat_map", cat)?;
                let y = cx.conv2d(cat, "head.conv", same, 1)?;
                cx.tape.relu(y)
            }
            Architecture::Tsem => {
                let b1 = cx.conv2d(x4, "b1.conv", same, 1)?;
                let b1 = cx.bn(b1, "b1.bn")?;
                let b1 = cx.tape.relu(b1);
                let b1 = cx.record("branch1_maps", b1)?;

                let seq = cx.tape.transpose(x)?;
                let (wi, wh, bias) = (cx.p("lstm.w_ih"), cx.p("lstm.w_hh"), cx.p("lstm.b"));
                let hs = cx.tape.lstm(seq, wi, wh, bias)?;
                let last = cx.tape.slice(hs, 1, t - 1, 1)?;
                let last = cx.tape.reshape(last, &[b, w])?;
                let up = cx.tape.upsample_linear(last, t)?;
                let g = cx.tape.relu(up);
                let g = cx.record("temporal_vector", g)?;

                let fused = cx.tape.mul_gate(b1, g)?;
                let fused = cx.record("fused_maps", fused)?;
                let y = cx.conv2d(fused, "head.conv", same, 1)?;
                cx.tape.relu(y)
            }
            Architecture::MtexCnn => {
                let same1 = Padding::same(c.window_size_1d());
                let h = cx.conv2d(x4, "c1.conv", same, 2)?;
                let h = cx.bn(h, "c1.bn")?;
                let h = cx.tape.relu(h);
                let h = cx.conv2d(h, "c2.conv", same, 2)?;
                let h = cx.bn(h, "c2.bn")?;
                let h = cx.tape.relu(h);
                let h = cx.record("branch1_maps", h)?;
                let r = cx.conv2d(h, "c2.reduce", Padding::NONE, 1)?;
                let len = c.map_len();
                let r = cx.tape.reshape(r, &[b, d, len])?;
                let h = cx.conv1d(r, "c3.conv", same1)?;
                let h = cx.bn(h, "c3.bn")?;
                let h = cx.tape.relu(h);
                let h = cx.conv1d(h, "c4.conv", same1)?;
                let h = cx.tape.relu(h);
                cx.tape.reshape(h, &[b, c.filters_1d, 1, len])?
            }
        };
        let pre_gap = cx.record("pre_gap_maps", pre_gap)?;
        debug_assert_eq!(
            cx.tape.shape(pre_gap),
            &[b, c.map_filters(), c.map_rows(), c.map_len()]
        );
        cx.finish(x, pre_gap)
    }

    /// Forward pass on a single (D, T) instance as a batch of one.
    pub fn forward_one(
        &self,
        instance: &Tensor,
        mode: Mode,
        hook: Option<Hook<'_>>,
    ) -> Result<ForwardPass> {
        if instance.rank() != 2 {
            return Err(Error::dim(
                "forward",
                format!("instance {:?} must be (D, T)", instance.shape()),
            ));
        }
        let b = Tensor::stack(&[instance])?;
        self.forward(&b, mode, hook)
    }
}

pub(super) fn head_only(model: &Model, maps: &Tensor) -> Result<Tensor> {
    let c = &model.config;
    let want = [c.map_filters(), c.map_rows(), c.map_len()];
    if maps.rank() != 4 || maps.shape()[1..] != want {
        return Err(Error::dim(
            "head",
            format!(
                "maps {:?} do not match (B, {}, {}, {})",
                maps.shape(),
                want[0],
                want[1],
                want[2]
            ),
        ));
    }
    let mut cx = Ctx::new(model, Mode::Eval, None);
    let m = cx.tape.constant(maps.clone());
    let logits = cx.head(m)?;
    Ok(cx.tape.value(logits).clone())
}
