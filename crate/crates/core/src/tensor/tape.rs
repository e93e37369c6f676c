//! Reverse-mode differentiation on an append-only tape.
//!
//! Nodes are appended in evaluation order, so insertion order is already a
//! topological order and `backward` only has to walk the list once in reverse.
//! A tape belongs to one thread; build a fresh tape per forward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use super::dense::Tensor;
use super::kernels::{self, ChannelView, ConvGeom, LstmCache, LstmGrads, Padding};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.index as usize
    }
}

/// Batch-normalization behaviour for a single call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by batch statistics and report them to the caller.
    Train,
    /// Normalize by the supplied running statistics.
    Infer,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        inputs: usize,
        outputs: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanTrailing {
        x: usize,
        inner: usize,
    },
    Reshape(usize),
    Transpose {
        x: usize,
        outer: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        stride_in: usize,
        offset: usize,
        chunk: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Lstm {
        x: usize,
        w_ih: usize,
        w_hh: usize,
        b: usize,
        dims: [usize; 4],
        cache: LstmCache,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        view: ChannelView,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Upsample {
        x: usize,
        rows: usize,
        len: usize,
        target: usize,
    },
    MulGate {
        maps: usize,
        gate: usize,
        batch: usize,
        per: usize,
        len: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch mean and biased variance.
pub type BatchMoments = (Vec<f64>, Vec<f64>);

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`, or `None` when `v` does not
    /// require gradients or the seed does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads.get(v.idx()).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros shaped like `v` when no path exists.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    j: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]))
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx()
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(name, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.map(|x| x * s);
        let rg = self.rg(&[ia]);
        self.push(value, Op::Scale(ia, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.map(f);
        let rg = self.rg(&[ia]);
        self.push(value, op(ia), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid_scalar, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let v = &self.nodes[ia].value;
        let cols = *v.shape().last().expect("rank >= 1");
        let value = Tensor::new(v.shape(), kernels::softmax_rows(v.data(), cols)).unwrap();
        let rg = self.rg(&[ia]);
        self.push(value, Op::Softmax { x: ia, cols }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(&[ia]);
        self.push(value, Op::Sum(ia), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let v = &self.nodes[ia].value;
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[ia]);
        self.push(value, Op::Mean(ia), rg)
    }

    /// Mean over every axis from `keep` onwards; the result has shape `shape[..keep]`.
    pub fn mean_trailing(&mut self, a: Var, keep: usize) -> Result<Var> {
        let ia = self.check(a);
        let v = &self.nodes[ia].value;
        if keep == 0 || keep >= v.rank() {
            return Err(Error::dim(
                "mean_trailing",
                format!("cannot keep {keep} of {} axes", v.rank()),
            ));
        }
        let inner: usize = v.shape()[keep..].iter().product();
        let data = v
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(&v.shape()[..keep], data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::MeanTrailing { x: ia, inner }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let value = self.nodes[ia].value.clone().reshape_in_place(shape)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Reshape(ia), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let v = &self.nodes[ia].value;
        let r = v.rank();
        if r < 2 {
            return Err(Error::dim("transpose", "need at least two axes"));
        }
        let (rows, cols) = (v.shape()[r - 2], v.shape()[r - 1]);
        let outer = v.numel() / (rows * cols);
        let mut data = vec![0.0; v.numel()];
        for o in 0..outer {
            let src = &v.data()[o * rows * cols..][..rows * cols];
            let dst = &mut data[o * rows * cols..][..rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(
            value,
            Op::Transpose {
                x: ia,
                outer,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let first = &self
            .nodes
            .get(
                *idx.first()
                    .ok_or_else(|| Error::dim("concat", "no inputs"))?,
            )
            .unwrap()
            .value;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} out of range")));
        }
        let base = first.shape().to_vec();
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = idx
            .iter()
            .map(|&i| self.nodes[i].value.shape()[axis] * inner)
            .collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &c) in idx.iter().zip(&chunks) {
                data.extend_from_slice(&self.nodes[i].value.data()[o * c..][..c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&idx);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: idx,
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a);
        let v = &self.nodes[ia].value;
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!(
                    "[{start}, {}) outside axis {axis} of {:?}",
                    start + len,
                    v.shape()
                ),
            ));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let stride_in = v.shape()[axis] * inner;
        let (offset, chunk) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[o * stride_in + offset..][..chunk]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(
            value,
            Op::Slice {
                x: ia,
                outer,
                stride_in,
                offset,
                chunk,
            },
            rg,
        ))
    }

    /// Matrix product of (m×k) and (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let value = Tensor::new(&[m, n], kernels::matmul(va.data(), vb.data(), m, k, n))?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            value,
            Op::Matmul {
                a: ia,
                b: ib,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Affine map `x · wᵀ + b` for x (rows×in), w (out×in), b (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x), self.check(w), self.check(b));
        let (vx, vw, vb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        if vx.rank() != 2
            || vw.rank() != 2
            || vx.shape()[1] != vw.shape()[1]
            || vb.shape() != [vw.shape()[0]]
        {
            return Err(Error::dim(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            ));
        }
        let (rows, inputs, outputs) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut data = Vec::with_capacity(rows * outputs);
        for r in 0..rows {
            let xr = &vx.data()[r * inputs..][..inputs];
            for o in 0..outputs {
                let wr = &vw.data()[o * inputs..][..inputs];
                data.push(vb.data()[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let value = Tensor::new(&[rows, outputs], data)?;
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(
            value,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
                rows,
                inputs,
                outputs,
            },
            rg,
        ))
    }

    /// 2-D convolution of x (B, C_in, H, W) with kernels (C_out, C_in, kH, kW).
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        padding: [Padding; 2],
        stride: [usize; 2],
    ) -> Result<Var> {
        let (ix, ik) = (self.check(x), self.check(k));
        let ib = bias.map(|b| self.check(b));
        let geom = conv_geometry(
            self.nodes[ix].value.shape(),
            self.nodes[ik].value.shape(),
            ib.map(|b| self.nodes[b].value.shape()),
            padding,
            stride,
        )?;
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[ik].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
        );
        let value = Tensor::new(&[geom.batch, geom.c_out, geom.ho, geom.wo], out)?;
        let mut deps = vec![ix, ik];
        deps.extend(ib);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: ix,
                k: ik,
                b: ib,
                geom,
            },
            rg,
        ))
    }

    /// 1-D convolution of x (B, C_in, T) with kernels (C_out, C_in, k).
    pub fn conv1d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 3 {
            return Err(Error::dim(
                "conv1d",
                format!("input {xs:?} and kernels {ks:?} must both have three axes"),
            ));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let k4 = self.reshape(k, &[ks[0], ks[1], 1, ks[2]])?;
        let y = self.conv2d(x4, k4, bias, [Padding::NONE, padding], [1, stride])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// LSTM over x (B, T, F); returns every hidden state, shape (B, T, H).
    /// Gate order in the stacked weights is input, forget, cell, output.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let (ix, iw, iu, ib) = (
            self.check(x),
            self.check(w_ih),
            self.check(w_hh),
            self.check(bias),
        );
        let dims = lstm_dims(
            self.nodes[ix].value.shape(),
            self.nodes[iw].value.shape(),
            self.nodes[iu].value.shape(),
            self.nodes[ib].value.shape(),
        )?;
        let [batch, steps, features, hidden] = dims;
        let cache = kernels::lstm_forward(
            batch,
            steps,
            features,
            hidden,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            self.nodes[iu].value.data(),
            self.nodes[ib].value.data(),
        )
        .map_err(|t| Error::Numeric(format!("LSTM state became non-finite at time step {t}")))?;
        let value = Tensor::new(&[batch, steps, hidden], cache.hidden.clone())?;
        let rg = self.rg(&[ix, iw, iu, ib]);
        Ok(self.push(
            value,
            Op::Lstm {
                x: ix,
                w_ih: iw,
                w_hh: iu,
                b: ib,
                dims,
                cache,
            },
            rg,
        ))
    }

    /// Batch normalization with per-channel affine parameters along `axis`.
    ///
    /// In [`NormMode::Train`] the batch mean and biased variance are used and
    /// returned so the caller can update its running state; in
    /// [`NormMode::Infer`] `running` supplies them.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: NormMode,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (ix, ig, ib) = (self.check(x), self.check(gamma), self.check(beta));
        let vx = &self.nodes[ix].value;
        if axis >= vx.rank() {
            return Err(Error::dim("batch_norm", format!("no channel axis {axis}")));
        }
        let view = ChannelView::new(vx.shape(), axis);
        let c = view.channels;
        for (name, len) in [
            ("gamma", self.nodes[ig].value.numel()),
            ("beta", self.nodes[ib].value.numel()),
            ("running mean", running.0.len()),
            ("running variance", running.1.len()),
        ] {
            if len != c {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} has {len} entries for {c} channels"),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "batch norm eps must be > 0, got {eps}"
            )));
        }
        let (stats, batch_stats) = match mode {
            NormMode::Train => (kernels::channel_moments(&view, vx.data()), true),
            NormMode::Infer => ((running.0.to_vec(), running.1.to_vec()), false),
        };
        let inv_std: Vec<f64> = stats.1.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let mut xhat = vec![0.0; vx.numel()];
        let mut out = vec![0.0; vx.numel()];
        for ch in 0..c {
            for i in view.for_channel(ch) {
                xhat[i] = (vx.data()[i] - stats.0[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + b[ch];
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[ix, ig, ib]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                view,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(stats)))
    }

    /// Linear interpolation of the last axis onto `target` points.
    pub fn upsample_linear(&mut self, a: Var, target: usize) -> Result<Var> {
        let ia = self.check(a);
        let v = &self.nodes[ia].value;
        if target == 0 {
            return Err(Error::dim("upsample_linear", "target length must be >= 1"));
        }
        let len = *v.shape().last().unwrap();
        let rows = v.numel() / len;
        let data = kernels::upsample_rows(v.data(), rows, len, target);
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = target;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(
            value,
            Op::Upsample {
                x: ia,
                rows,
                len,
                target,
            },
            rg,
        ))
    }

    /// Multiplies maps (B, ..., T) by a per-instance gate (B, T) broadcast over
    /// every axis in between.
    pub fn mul_gate(&mut self, maps: Var, gate: Var) -> Result<Var> {
        let (im, ig) = (self.check(maps), self.check(gate));
        let (vm, vg) = (&self.nodes[im].value, &self.nodes[ig].value);
        let ms = vm.shape();
        if vg.rank() != 2
            || ms.len() < 2
            || ms[0] != vg.shape()[0]
            || ms.last() != vg.shape().last()
        {
            return Err(Error::dim(
                "mul_gate",
                format!("maps {ms:?} cannot be gated by {:?}", vg.shape()),
            ));
        }
        let (batch, len) = (ms[0], *ms.last().unwrap());
        let per = vm.numel() / (batch * len);
        let mut data = vm.data().to_vec();
        for n in 0..batch {
            let gn = &vg.data()[n * len..][..len];
            for row in data[n * per * len..][..per * len].chunks_mut(len) {
                for (x, g) in row.iter_mut().zip(gn) {
                    *x *= g;
                }
            }
        }
        let value = Tensor::new(ms, data)?;
        let rg = self.rg(&[im, ig]);
        Ok(self.push(
            value,
            Op::MulGate {
                maps: im,
                gate: ig,
                batch,
                per,
                len,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(logits), logits (B, K).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits);
        let v = &self.nodes[il].value;
        if v.rank() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} for {} labels", v.shape(), labels.len()),
            ));
        }
        let cols = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                n_classes: cols,
            });
        }
        let probs = kernels::softmax_rows(v.data(), cols);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &v.data()[r * cols..][..cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        let rg = self.rg(&[il]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
                cols,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx() >= self.nodes.len() {
            return Err(Error::Usage(
                "backward() on a value not recorded on this tape".into(),
            ));
        }
        let v = &self.nodes[loss.idx()].value;
        if v.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_seeded(loss, &Tensor::ones(v.shape()))
    }

    /// Reverse pass from `out` with an explicit upstream gradient.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if out.tape != self.id || out.idx() >= self.nodes.len() {
            return Err(Error::Usage(
                "backward() on a value not recorded on this tape".into(),
            ));
        }
        let root = out.idx();
        same_shape("backward", &self.nodes[root].value, seed)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(seed.data().to_vec());
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape(), d).unwrap()))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().copied());
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    add_into(s, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().copied());
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    add_into(s, g.iter().map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().zip(vb).map(|(g, y)| g * y));
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    add_into(s, g.iter().zip(va).map(|(g, x)| g * x));
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().map(|x| x * k));
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(s) = slot(nodes, grads, *a) {
                    for r in 0..*m {
                        for p in 0..*k {
                            s[r * k + p] +=
                                (0..*n).map(|c| g[r * n + c] * vb[p * n + c]).sum::<f64>();
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for p in 0..*k {
                        for c in 0..*n {
                            s[p * n + c] +=
                                (0..*m).map(|r| va[r * k + p] * g[r * n + c]).sum::<f64>();
                        }
                    }
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inputs,
                outputs,
            } => {
                let (vx, vw) = (nodes[*x].value.data(), nodes[*w].value.data());
                if let Some(s) = slot(nodes, grads, *b) {
                    for r in 0..*rows {
                        add_into(s, g[r * outputs..][..*outputs].iter().copied());
                    }
                }
                if let Some(s) = slot(nodes, grads, *w) {
                    for r in 0..*rows {
                        let xr = &vx[r * inputs..][..*inputs];
                        for o in 0..*outputs {
                            let gv = g[r * outputs + o];
                            add_into(&mut s[o * inputs..][..*inputs], xr.iter().map(|x| gv * x));
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    for r in 0..*rows {
                        let sr = &mut s[r * inputs..][..*inputs];
                        for o in 0..*outputs {
                            let gv = g[r * outputs + o];
                            add_into(sr, vw[o * inputs..][..*inputs].iter().map(|w| gv * w));
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let va = nodes[*a].value.data();
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(
                        s,
                        g.iter()
                            .zip(va)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                    );
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)));
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)));
                }
            }
            Op::Softmax { x, cols } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((sr, gr), yr) in s
                        .chunks_mut(*cols)
                        .zip(g.chunks(*cols))
                        .zip(out.chunks(*cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        add_into(sr, gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    let g0 = g[0];
                    s.iter_mut().for_each(|v| *v += g0);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    let g0 = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|v| *v += g0);
                }
            }
            Op::MeanTrailing { x, inner } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for (chunk, gv) in s.chunks_mut(*inner).zip(g) {
                        let d = gv / *inner as f64;
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g.iter().copied());
                }
            }
            Op::Transpose {
                x,
                outer,
                rows,
                cols,
            } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let block = rows * cols;
                    for o in 0..*outer {
                        for i in 0..*rows {
                            for j in 0..*cols {
                                s[o * block + i * cols + j] += g[o * block + j * rows + i];
                            }
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&j, &c) in inputs.iter().zip(chunks) {
                    if wants(j) {
                        let s = slot(nodes, grads, j).unwrap();
                        for o in 0..*outer {
                            add_into(
                                &mut s[o * c..][..c],
                                g[o * total + offset..][..c].iter().copied(),
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice {
                x,
                outer,
                stride_in,
                offset,
                chunk,
            } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for o in 0..*outer {
                        add_into(
                            &mut s[o * stride_in + offset..][..*chunk],
                            g[o * chunk..][..*chunk].iter().copied(),
                        );
                    }
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let (vx, vk) = (nodes[*x].value.data(), nodes[*k].value.data());
                // Borrow each gradient buffer separately; inputs are distinct nodes.
                let mut gx = wants(*x).then(|| vec![0.0; vx.len()]);
                let mut gk = wants(*k).then(|| vec![0.0; vk.len()]);
                let mut gb = b.filter(|&b| wants(b)).map(|_| vec![0.0; geom.c_out]);
                kernels::conv2d_backward(
                    geom,
                    vx,
                    vk,
                    g,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(d) = gx {
                    add_into(slot(nodes, grads, *x).unwrap(), d);
                }
                if let Some(d) = gk {
                    add_into(slot(nodes, grads, *k).unwrap(), d);
                }
                if let (Some(d), Some(b)) = (gb, b) {
                    add_into(slot(nodes, grads, *b).unwrap(), d);
                }
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                dims,
                cache,
            } => {
                let [batch, steps, features, hidden] = *dims;
                let (vx, vw, vu) = (
                    nodes[*x].value.data(),
                    nodes[*w_ih].value.data(),
                    nodes[*w_hh].value.data(),
                );
                let mut gx = wants(*x).then(|| vec![0.0; vx.len()]);
                let mut gw = wants(*w_ih).then(|| vec![0.0; vw.len()]);
                let mut gu = wants(*w_hh).then(|| vec![0.0; vu.len()]);
                let mut gb = wants(*b).then(|| vec![0.0; 4 * hidden]);
                kernels::lstm_backward(
                    batch,
                    steps,
                    features,
                    hidden,
                    vx,
                    vw,
                    vu,
                    cache,
                    g,
                    LstmGrads {
                        gx: gx.as_deref_mut(),
                        gw_ih: gw.as_deref_mut(),
                        gw_hh: gu.as_deref_mut(),
                        gb: gb.as_deref_mut(),
                    },
                );
                for (j, d) in [(*x, gx), (*w_ih, gw), (*w_hh, gu), (*b, gb)] {
                    if let Some(d) = d {
                        add_into(slot(nodes, grads, j).unwrap(), d);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                view,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gam = nodes[*gamma].value.data();
                let n = view.count() as f64;
                let mut dgamma = vec![0.0; view.channels];
                let mut dbeta = vec![0.0; view.channels];
                let mut dx = wants(*x).then(|| vec![0.0; g.len()]);
                for c in 0..view.channels {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for i in view.for_channel(c) {
                        sg += g[i];
                        sgx += g[i] * xhat[i];
                    }
                    dbeta[c] = sg;
                    dgamma[c] = sgx;
                    if let Some(dx) = dx.as_mut() {
                        let k = gam[c] * inv_std[c];
                        for i in view.for_channel(c) {
                            dx[i] = if *batch_stats {
                                k * (g[i] - sg / n - xhat[i] * sgx / n)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *gamma) {
                    add_into(s, dgamma);
                }
                if let Some(s) = slot(nodes, grads, *beta) {
                    add_into(s, dbeta);
                }
                if let Some(d) = dx {
                    add_into(slot(nodes, grads, *x).unwrap(), d);
                }
            }
            Op::Upsample {
                x,
                rows,
                len,
                target,
            } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    kernels::upsample_rows_backward(g, *rows, *len, *target, s);
                }
            }
            Op::MulGate {
                maps,
                gate,
                batch,
                per,
                len,
            } => {
                let (vm, vg) = (nodes[*maps].value.data(), nodes[*gate].value.data());
                if let Some(s) = slot(nodes, grads, *maps) {
                    for n in 0..*batch {
                        let gn = &vg[n * len..][..*len];
                        let base = n * per * len;
                        for r in 0..*per {
                            let o = base + r * len;
                            add_into(
                                &mut s[o..o + len],
                                g[o..o + len].iter().zip(gn).map(|(a, b)| a * b),
                            );
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *gate) {
                    for n in 0..*batch {
                        let base = n * per * len;
                        for r in 0..*per {
                            let o = base + r * len;
                            add_into(
                                &mut s[n * len..][..*len],
                                g[o..o + len]
                                    .iter()
                                    .zip(&vm[o..o + len])
                                    .map(|(a, b)| a * b),
                            );
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                cols,
            } => {
                if let Some(s) = slot(nodes, grads, *logits) {
                    let scale = g[0] / labels.len() as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..*cols {
                            let target = if c == l { 1.0 } else { 0.0 };
                            s[r * cols + c] += scale * (probs[r * cols + c] - target);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geometry(
    xs: &[usize],
    ks: &[usize],
    bs: Option<&[usize]>,
    pad: [Padding; 2],
    stride: [usize; 2],
) -> Result<ConvGeom> {
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!("input {xs:?} and kernels {ks:?} must both have four axes"),
        ));
    }
    if ks[1] != xs[1] {
        return Err(Error::dim(
            "conv2d",
            format!(
                "axis 1: kernels expect {} input channels, input has {}",
                ks[1], xs[1]
            ),
        ));
    }
    if let Some(bs) = bs {
        if bs != [ks[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {bs:?} does not match {} output channels", ks[0]),
            ));
        }
    }
    if stride.contains(&0) {
        return Err(Error::dim("conv2d", "stride must be >= 1"));
    }
    let mut out = [0; 2];
    for a in 0..2 {
        let padded = xs[2 + a] + pad[a].total();
        if ks[2 + a] > padded {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "axis {}: kernel extent {} exceeds padded input extent {padded}",
                    2 + a,
                    ks[2 + a]
                ),
            ));
        }
        out[a] = (padded - ks[2 + a]) / stride[a] + 1;
    }
    Ok(ConvGeom {
        batch: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: ks[0],
        kh: ks[2],
        kw: ks[3],
        ho: out[0],
        wo: out[1],
        pad,
        stride,
    })
}

pub(crate) fn lstm_dims(
    xs: &[usize],
    ws: &[usize],
    us: &[usize],
    bs: &[usize],
) -> Result<[usize; 4]> {
    if xs.len() != 3 {
        return Err(Error::dim(
            "lstm",
            format!("input {xs:?} must be (batch, steps, features)"),
        ));
    }
    let (batch, steps, features) = (xs[0], xs[1], xs[2]);
    if us.len() != 2 || us[0] != 4 * us[1] {
        return Err(Error::dim(
            "lstm",
            format!("recurrent weights {us:?} must be (4H, H)"),
        ));
    }
    let hidden = us[1];
    if ws != [4 * hidden, features] {
        return Err(Error::dim(
            "lstm",
            format!(
                "input weights {ws:?}, expected [{}, {features}]",
                4 * hidden
            ),
        ));
    }
    if bs != [4 * hidden] {
        return Err(Error::dim(
            "lstm",
            format!("bias {bs:?}, expected [{}]", 4 * hidden),
        ));
    }
    Ok([batch, steps, features, hidden])
}
