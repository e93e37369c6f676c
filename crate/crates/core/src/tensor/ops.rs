//! Forward-only entry points for the numerical kernels.
//!
//! These accept unbatched layouts (a leading batch axis is also accepted by
//! the convolutions) and run the same code the tape uses.

use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use super::kernels::{self, Padding};
use super::tape::{NormMode, Tape};
use crate::error::{Error, Result};

fn batched(input: &Tensor, rank: usize, op: &'static str) -> Result<(Tensor, bool)> {
    match input.rank() {
        r if r == rank => {
            let mut shape = vec![1];
            shape.extend_from_slice(input.shape());
            Ok((input.reshape(&shape)?, true))
        }
        r if r == rank + 1 => Ok((input.clone(), false)),
        r => Err(Error::dim(
            op,
            format!(
                "input has {r} axes, expected {rank} (or {} with a batch axis)",
                rank + 1
            ),
        )),
    }
}

fn unbatch(t: &Tensor, squeeze: bool) -> Tensor {
    if squeeze {
        t.outer(0)
    } else {
        t.clone()
    }
}

/// 2-D convolution of (C_in, D, T) or (B, C_in, D, T) with (C_out, C_in, kH, kW) kernels.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    padding: [Padding; 2],
    stride: [usize; 2],
) -> Result<Tensor> {
    let (x, squeeze) = batched(input, 3, "conv2d")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let kv = tape.constant(kernels.clone());
    let y = tape.conv2d(xv, kv, None, padding, stride)?;
    Ok(unbatch(tape.value(y), squeeze))
}

/// 1-D convolution of (C_in, T) or (B, C_in, T) with (C_out, C_in, k) kernels.
pub fn conv1d_forward(
    input: &Tensor,
    kernels: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    let (x, squeeze) = batched(input, 2, "conv1d")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let kv = tape.constant(kernels.clone());
    let y = tape.conv1d(xv, kv, None, padding, stride)?;
    Ok(unbatch(tape.value(y), squeeze))
}

/// Stacked LSTM gate parameters; rows are grouped input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    /// (4H, F)
    pub w_ih: Tensor,
    /// (4H, H)
    pub w_hh: Tensor,
    /// (4H)
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[1]
    }
}

/// Runs the recurrence over `input` (T, F) from a zero state.
/// Returns every hidden state (T, H) and the last one (H).
pub fn lstm_forward(input: &Tensor, weights: &LstmWeights) -> Result<(Tensor, Tensor)> {
    if input.rank() != 2 {
        return Err(Error::dim(
            "lstm",
            format!("input {:?} must be (T, F)", input.shape()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.reshape(&[1, input.shape()[0], input.shape()[1]])?);
    let w = tape.constant(weights.w_ih.clone());
    let u = tape.constant(weights.w_hh.clone());
    let b = tape.constant(weights.bias.clone());
    let h = tape.lstm(x, w, u, b)?;
    let seq = tape.value(h).outer(0);
    let steps = seq.shape()[0];
    let last = Tensor::vector(seq.row(steps - 1));
    Ok((seq, last))
}

/// Running statistics carried by a batch-normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Folds one batch's mean and biased variance (over `count` values per
    /// channel) into the running estimates; the variance is stored unbiased.
    pub fn update(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for (r, &x) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * x;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v * correction;
        }
    }
}

/// Normalizes `input` per channel along `axis` with unit scale and zero shift.
/// In train mode the batch statistics are used and folded into `state`.
pub fn batchnorm_forward(
    input: &Tensor,
    axis: usize,
    mode: NormMode,
    state: &mut BatchNormState,
    eps: f64,
) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(Error::dim("batch_norm", format!("no channel axis {axis}")));
    }
    let c = input.shape()[axis];
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let g = tape.constant(Tensor::ones(&[c]));
    let b = tape.constant(Tensor::zeros(&[c]));
    let (y, stats) = tape.batch_norm(
        x,
        g,
        b,
        axis,
        mode,
        (&state.running_mean, &state.running_var),
        eps,
    )?;
    if let Some((mean, var)) = stats {
        state.update(&mean, &var, input.numel() / c);
    }
    Ok(tape.value(y).clone())
}

/// Per-channel mean over every axis after the first: (C, ...) -> (C).
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::dim(
            "global_average_pool",
            format!(
                "input {:?} needs a channel axis and at least one more",
                input.shape()
            ),
        ));
    }
    let c = input.shape()[0];
    let inner = input.numel() / c;
    let data = input
        .data()
        .chunks(inner)
        .map(|ch| ch.iter().sum::<f64>() / inner as f64)
        .collect();
    Tensor::new(&[c], data)
}

/// Piecewise-linear resampling of a length-L signal onto `target` points.
/// Endpoints are kept exactly; a single value is broadcast.
pub fn upsample_linear_1d(input: &Tensor, target: usize) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(Error::dim(
            "upsample_linear_1d",
            format!("input {:?} must be 1-D", input.shape()),
        ));
    }
    if target == 0 {
        return Err(Error::dim(
            "upsample_linear_1d",
            "target length must be >= 1",
        ));
    }
    let len = input.numel();
    Tensor::new(
        &[target],
        kernels::upsample_rows(input.data(), 1, len, target),
    )
}

/// Softmax over the last axis.
pub fn softmax(input: &Tensor) -> Tensor {
    let cols = *input.shape().last().unwrap();
    Tensor::new(input.shape(), kernels::softmax_rows(input.data(), cols)).unwrap()
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Mean over the batch of `-ln softmax(logits)[label]`, logits (B, K).
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).data()[0])
}
