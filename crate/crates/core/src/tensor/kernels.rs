//! Direct loop kernels shared by the tape ops and the forward-only API.
//!
//! Everything here works on flat row-major slices. Shape validation happens
//! in the callers; the kernels only assert what would otherwise be UB-adjacent.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Zero padding added before and after one axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        before: 0,
        after: 0,
    };

    pub fn symmetric(n: usize) -> Self {
        Self {
            before: n,
            after: n,
        }
    }

    /// Padding that keeps the output length equal to `ceil(len / stride)` for
    /// a kernel of extent `k`; even kernels pad one more cell after than before.
    pub fn same(k: usize) -> Self {
        Self {
            before: (k - 1) / 2,
            after: k / 2,
        }
    }

    pub fn total(self) -> usize {
        self.before + self.after
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad: [Padding; 2],
    pub stride: [usize; 2],
}

/// Output positions `o` for which `o * stride + offset - pad` lands inside `0..len`.
fn valid(out_len: usize, len: usize, pad: usize, stride: usize, offset: usize) -> Range<usize> {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if len + pad > offset {
        (len + pad - offset).div_ceil(stride).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let [sh, sw] = g.stride;
    let (pt, pl) = (g.pad[0].before, g.pad[1].before);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let op = &mut out[(n * g.c_out + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                op.fill(b[o]);
            }
            for c in 0..g.c_in {
                let xp = &x[(n * g.c_in + c) * plane_in..][..plane_in];
                let kp = &k[(o * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
                for i in 0..g.kh {
                    for oh in valid(g.ho, g.h, pt, sh, i) {
                        let ih = oh * sh + i - pt;
                        let xrow = &xp[ih * g.w..][..g.w];
                        let orow = &mut op[oh * g.wo..][..g.wo];
                        for j in 0..g.kw {
                            let wv = kp[i * g.kw + j];
                            let r = valid(g.wo, g.w, pl, sw, j);
                            if r.is_empty() {
                                continue;
                            }
                            if sw == 1 {
                                let start = r.start + j - pl;
                                for (ov, xv) in orow[r.clone()].iter_mut().zip(&xrow[start..]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ow in r {
                                    orow[ow] += wv * xrow[ow * sw + j - pl];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a 2-D convolution. `gx`/`gk`/`gb` are accumulated into when present.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let [sh, sw] = g.stride;
    let (pt, pl) = (g.pad[0].before, g.pad[1].before);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    if let Some(gb) = gb {
        for n in 0..g.batch {
            for (o, b) in gb.iter_mut().enumerate() {
                *b += gout[(n * g.c_out + o) * plane_out..][..plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    if gx.is_none() && gk.is_none() {
        return;
    }
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let gp = &gout[(n * g.c_out + o) * plane_out..][..plane_out];
            for c in 0..g.c_in {
                let xoff = (n * g.c_in + c) * plane_in;
                let koff = (o * g.c_in + c) * g.kh * g.kw;
                for i in 0..g.kh {
                    for oh in valid(g.ho, g.h, pt, sh, i) {
                        let ih = oh * sh + i - pt;
                        let grow = &gp[oh * g.wo..][..g.wo];
                        for j in 0..g.kw {
                            let r = valid(g.wo, g.w, pl, sw, j);
                            if r.is_empty() {
                                continue;
                            }
                            let row_off = xoff + ih * g.w;
                            if let Some(gk) = gk.as_deref_mut() {
                                let xrow = &x[row_off..][..g.w];
                                let acc: f64 = if sw == 1 {
                                    let start = r.start + j - pl;
                                    grow[r.clone()]
                                        .iter()
                                        .zip(&xrow[start..])
                                        .map(|(a, b)| a * b)
                                        .sum()
                                } else {
                                    r.clone().map(|ow| grow[ow] * xrow[ow * sw + j - pl]).sum()
                                };
                                gk[koff + i * g.kw + j] += acc;
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let wv = k[koff + i * g.kw + j];
                                let xrow = &mut gx[row_off..][..g.w];
                                if sw == 1 {
                                    let start = r.start + j - pl;
                                    for (xv, gv) in xrow[start..].iter_mut().zip(&grow[r]) {
                                        *xv += wv * gv;
                                    }
                                } else {
                                    for ow in r {
                                        xrow[ow * sw + j - pl] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-step values kept for backpropagation through time.
#[derive(Clone, Debug)]
pub(crate) struct LstmCache {
    /// Post-activation gates `[i, f, g, o]`, shape (B, T, 4H).
    pub gates: Vec<f64>,
    /// Cell states, shape (B, T, H).
    pub cells: Vec<f64>,
    /// Hidden states, shape (B, T, H).
    pub hidden: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// LSTM recurrence over `x` of shape (B, T, F), zero initial state.
/// Returns `Err(t)` with the first time step that produced a non-finite value.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward(
    batch: usize,
    steps: usize,
    features: usize,
    hidden: usize,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
) -> Result<LstmCache, usize> {
    let g4 = 4 * hidden;
    let mut cache = LstmCache {
        gates: vec![0.0; batch * steps * g4],
        cells: vec![0.0; batch * steps * hidden],
        hidden: vec![0.0; batch * steps * hidden],
    };
    let mut z = vec![0.0; g4];
    for n in 0..batch {
        for t in 0..steps {
            let xt = &x[(n * steps + t) * features..][..features];
            z.copy_from_slice(bias);
            for (r, zr) in z.iter_mut().enumerate() {
                let wr = &w_ih[r * features..][..features];
                *zr += wr.iter().zip(xt).map(|(a, b)| a * b).sum::<f64>();
            }
            if t > 0 {
                let hp = &cache.hidden[(n * steps + t - 1) * hidden..][..hidden];
                for (r, zr) in z.iter_mut().enumerate() {
                    let wr = &w_hh[r * hidden..][..hidden];
                    *zr += wr.iter().zip(hp).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let base = (n * steps + t) * hidden;
            let gates = &mut cache.gates[(n * steps + t) * g4..][..g4];
            for u in 0..hidden {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[hidden + u]);
                let gg = z[2 * hidden + u].tanh();
                let o = sigmoid(z[3 * hidden + u]);
                gates[u] = i;
                gates[hidden + u] = f;
                gates[2 * hidden + u] = gg;
                gates[3 * hidden + u] = o;
                let c_prev = if t > 0 {
                    cache.cells[base - hidden + u]
                } else {
                    0.0
                };
                let c = f * c_prev + i * gg;
                cache.cells[base + u] = c;
                cache.hidden[base + u] = o * c.tanh();
            }
            if cache.hidden[base..base + hidden]
                .iter()
                .chain(&cache.cells[base..base + hidden])
                .any(|v| !v.is_finite())
            {
                return Err(t);
            }
        }
    }
    Ok(cache)
}

pub(crate) struct LstmGrads<'a> {
    pub gx: Option<&'a mut [f64]>,
    pub gw_ih: Option<&'a mut [f64]>,
    pub gw_hh: Option<&'a mut [f64]>,
    pub gb: Option<&'a mut [f64]>,
}

/// Backpropagation through time; `gout` is the gradient w.r.t. every hidden state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    batch: usize,
    steps: usize,
    features: usize,
    hidden: usize,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    cache: &LstmCache,
    gout: &[f64],
    mut grads: LstmGrads<'_>,
) {
    let g4 = 4 * hidden;
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut dz = vec![0.0; g4];
    for n in 0..batch {
        dh_next.fill(0.0);
        dc_next.fill(0.0);
        for t in (0..steps).rev() {
            let base = (n * steps + t) * hidden;
            let gates = &cache.gates[(n * steps + t) * g4..][..g4];
            for u in 0..hidden {
                let (i, f, gg, o) = (
                    gates[u],
                    gates[hidden + u],
                    gates[2 * hidden + u],
                    gates[3 * hidden + u],
                );
                let c = cache.cells[base + u];
                let tc = c.tanh();
                let c_prev = if t > 0 {
                    cache.cells[base - hidden + u]
                } else {
                    0.0
                };
                let dh = gout[base + u] + dh_next[u];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
                dz[u] = dc * gg * i * (1.0 - i);
                dz[hidden + u] = dc * c_prev * f * (1.0 - f);
                dz[2 * hidden + u] = dc * i * (1.0 - gg * gg);
                dz[3 * hidden + u] = dh * tc * o * (1.0 - o);
                dc_next[u] = dc * f;
            }
            let xt = &x[(n * steps + t) * features..][..features];
            if let Some(gb) = grads.gb.as_deref_mut() {
                for (b, d) in gb.iter_mut().zip(&dz) {
                    *b += d;
                }
            }
            if let Some(gw) = grads.gw_ih.as_deref_mut() {
                for (r, &d) in dz.iter().enumerate() {
                    for (w, xv) in gw[r * features..][..features].iter_mut().zip(xt) {
                        *w += d * xv;
                    }
                }
            }
            if let Some(gx) = grads.gx.as_deref_mut() {
                let gxt = &mut gx[(n * steps + t) * features..][..features];
                for (r, &d) in dz.iter().enumerate() {
                    for (g, w) in gxt.iter_mut().zip(&w_ih[r * features..][..features]) {
                        *g += d * w;
                    }
                }
            }
            dh_next.fill(0.0);
            if t > 0 {
                let hp = &cache.hidden[base - hidden..base];
                if let Some(gw) = grads.gw_hh.as_deref_mut() {
                    for (r, &d) in dz.iter().enumerate() {
                        for (w, hv) in gw[r * hidden..][..hidden].iter_mut().zip(hp) {
                            *w += d * hv;
                        }
                    }
                }
                for (r, &d) in dz.iter().enumerate() {
                    for (g, w) in dh_next.iter_mut().zip(&w_hh[r * hidden..][..hidden]) {
                        *g += d * w;
                    }
                }
            }
        }
    }
}

/// Layout of a tensor around a chosen channel axis: (outer, channels, inner).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelView {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelView {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            channels: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    pub fn for_channel(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.outer).flat_map(move |o| {
            let start = (o * self.channels + c) * self.inner;
            start..start + self.inner
        })
    }
}

/// Per-channel mean and biased variance, two passes.
pub(crate) fn channel_moments(view: &ChannelView, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = view.count() as f64;
    let mut mean = vec![0.0; view.channels];
    let mut var = vec![0.0; view.channels];
    for c in 0..view.channels {
        let m = view.for_channel(c).map(|i| x[i]).sum::<f64>() / n;
        mean[c] = m;
        var[c] = view.for_channel(c).map(|i| (x[i] - m).powi(2)).sum::<f64>() / n;
    }
    (mean, var)
}

/// Linear interpolation positions for resampling `len` points onto `target`.
/// Returns `(left index, weight of the right neighbour)`.
pub(crate) fn linear_positions(len: usize, target: usize) -> Vec<(usize, f64)> {
    (0..target)
        .map(|t| {
            if len == 1 || target == 1 {
                return (0, 0.0);
            }
            let pos = (t * (len - 1)) as f64 / (target - 1) as f64;
            let left = (pos.floor() as usize).min(len - 1);
            if left == len - 1 {
                (left, 0.0)
            } else {
                (left, pos - left as f64)
            }
        })
        .collect()
}

pub(crate) fn upsample_rows(x: &[f64], rows: usize, len: usize, target: usize) -> Vec<f64> {
    let pos = linear_positions(len, target);
    let mut out = Vec::with_capacity(rows * target);
    for r in 0..rows {
        let row = &x[r * len..][..len];
        out.extend(pos.iter().map(|&(i, a)| {
            if a == 0.0 {
                row[i]
            } else {
                (1.0 - a) * row[i] + a * row[i + 1]
            }
        }));
    }
    out
}

pub(crate) fn upsample_rows_backward(
    gout: &[f64],
    rows: usize,
    len: usize,
    target: usize,
    gx: &mut [f64],
) {
    let pos = linear_positions(len, target);
    for r in 0..rows {
        let g = &gout[r * target..][..target];
        let gr = &mut gx[r * len..][..len];
        for (&(i, a), &gv) in pos.iter().zip(g) {
            gr[i] += (1.0 - a) * gv;
            if a != 0.0 {
                gr[i + 1] += a * gv;
            }
        }
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// `a` (m×k) times `b` (k×n).
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges() {
        // len 5, pad 1, stride 1, kernel offset 0: output 0 reads input -1.
        assert_eq!(valid(5, 5, 1, 1, 0), 1..5);
        assert_eq!(valid(5, 5, 1, 1, 2), 0..4);
        assert_eq!(valid(3, 5, 1, 2, 0), 1..3);
        assert_eq!(valid(4, 2, 3, 1, 0), 3..4);
    }

    #[test]
    fn same_padding_keeps_length() {
        for k in 1..8 {
            let p = Padding::same(k);
            assert_eq!(10 + p.total() - k + 1, 10);
        }
    }

    #[test]
    fn interpolation_positions_hit_endpoints() {
        let pos = linear_positions(4, 7);
        assert_eq!(pos[0], (0, 0.0));
        assert_eq!(pos[6], (3, 0.0));
    }
}
