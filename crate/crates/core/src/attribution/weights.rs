//! Channel-weight formulas on flat activation grids.
//!
//! An activation for one instance is laid out (F, R, L) row-major. Channel
//! `k = f * R + r` owns the contiguous run of `L` cells starting at `k * L`,
//! which is also the dense-layer input index of its pooled value.

/// Shape of one instance's activation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub filters: usize,
    pub rows: usize,
    pub len: usize,
}

impl Layout {
    pub fn channels(&self) -> usize {
        self.filters * self.rows
    }

    pub fn numel(&self) -> usize {
        self.channels() * self.len
    }

    /// Cells of channel `k`.
    pub fn cells<'a>(&self, grid: &'a [f64], k: usize) -> &'a [f64] {
        &grid[k * self.len..(k + 1) * self.len]
    }

    /// Row of the R x L output grid that channel `k` lands on.
    pub fn row_of(&self, k: usize) -> usize {
        k % self.rows
    }
}

/// Guard added to the denominator of rational weights.
pub const EPS: f64 = 1e-12;

/// ReLU(sum_k w_k A_k) on the R x L grid.
pub fn combine(layout: Layout, acts: &[f64], weights: &[f64]) -> Vec<f64> {
    let l = layout.len;
    let mut grid = vec![0.0; layout.rows * l];
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let out = &mut grid[layout.row_of(k) * l..][..l];
        for (o, a) in out.iter_mut().zip(layout.cells(acts, k)) {
            *o += w * a;
        }
    }
    for v in &mut grid {
        *v = v.max(0.0);
    }
    grid
}

/// Grad-CAM: the pooled gradient of each channel.
pub fn grad_cam(layout: Layout, grads: &[f64]) -> Vec<f64> {
    (0..layout.channels())
        .map(|k| layout.cells(grads, k).iter().sum::<f64>() / layout.len as f64)
        .collect()
}

/// Grad-CAM++ from first, second and third gradient moments (for a single
/// pass these are g, g*g and g*g*g). Cells whose denominator vanishes get
/// alpha = 0.
pub fn grad_cam_pp(layout: Layout, acts: &[f64], g1: &[f64], g2: &[f64], g3: &[f64]) -> Vec<f64> {
    (0..layout.channels())
        .map(|k| {
            let (a, d1, d2, d3) = (
                layout.cells(acts, k),
                layout.cells(g1, k),
                layout.cells(g2, k),
                layout.cells(g3, k),
            );
            let s: f64 = a.iter().zip(d3).map(|(a, g)| a * g).sum();
            d1.iter()
                .zip(d2)
                .map(|(&g, &gg)| {
                    let den = 2.0 * gg + s;
                    let alpha = if den == 0.0 { 0.0 } else { gg / den };
                    alpha * g.max(0.0)
                })
                .sum()
        })
        .collect()
}

/// XGrad-CAM: activation-weighted gradient over total activation.
pub fn xgrad_cam(layout: Layout, acts: &[f64], grads: &[f64]) -> Vec<f64> {
    (0..layout.channels())
        .map(|k| {
            let (a, g) = (layout.cells(acts, k), layout.cells(grads, k));
            let num: f64 = a.iter().zip(g).map(|(a, g)| a * g).sum();
            num / (a.iter().sum::<f64>() + EPS)
        })
        .collect()
}

/// Ablation-CAM: relative score drop when channel k is zeroed.
pub fn ablation(score: f64, ablated: &[f64]) -> Vec<f64> {
    ablated
        .iter()
        .map(|y| (score - y) / (score.abs() + EPS))
        .collect()
}

/// Softmax over the scores of non-flat channels; flat channels (`None`) get 0.
pub fn score_softmax(scores: &[Option<f64>]) -> Vec<f64> {
    let max = scores
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    if max == f64::NEG_INFINITY {
        return vec![0.0; scores.len()];
    }
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| s.map_or(0.0, |s| (s - max).exp()))
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Min-max normalization of one channel, `None` when the channel is flat.
pub fn minmax(cells: &[f64]) -> Option<Vec<f64>> {
    let (lo, hi) = cells
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return None;
    }
    Some(cells.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: Layout = Layout {
        filters: 1,
        rows: 1,
        len: 4,
    };

    #[test]
    fn combine_applies_relu() {
        assert_eq!(
            combine(ONE, &[-1.0, 2.0, 0.5, -3.0], &[1.0]),
            vec![0.0, 2.0, 0.5, 0.0]
        );
        assert_eq!(combine(ONE, &[1.0, 2.0, 0.5, 3.0], &[0.0]), vec![0.0; 4]);
    }

    #[test]
    fn channels_land_on_their_rows() {
        let layout = Layout {
            filters: 2,
            rows: 2,
            len: 1,
        };
        // channels (f0,r0) (f0,r1) (f1,r0) (f1,r1)
        let grid = combine(layout, &[1.0, 10.0, 100.0, 1000.0], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grid, vec![101.0, 1010.0]);
    }

    #[test]
    fn negative_gradients_zero_the_plus_plus_weight() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let g = [-1.0, -0.5, -2.0, -0.1];
        let g2: Vec<f64> = g.iter().map(|g| g * g).collect();
        let g3: Vec<f64> = g.iter().map(|g| g * g * g).collect();
        assert_eq!(grad_cam_pp(ONE, &a, &g, &g2, &g3), vec![0.0]);
    }

    #[test]
    fn flat_channels_are_skipped() {
        assert_eq!(minmax(&[2.0, 2.0]), None);
        assert_eq!(
            minmax(&[0.0, 1.0, 2.0, 3.0]).unwrap(),
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
        );
        assert_eq!(score_softmax(&[None, Some(3.0), None]), vec![0.0, 1.0, 0.0]);
        assert_eq!(score_softmax(&[None, None]), vec![0.0, 0.0]);
    }

    #[test]
    fn xgrad_guard_on_zero_activations() {
        assert_eq!(xgrad_cam(ONE, &[0.0; 4], &[1.0; 4]), vec![0.0]);
    }
}
