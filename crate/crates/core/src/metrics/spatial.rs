use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Distance from the uniform share below which a row or column sum counts
/// as equal to it.
pub const UNIFORM_TOL: f64 = 1e-9;

fn sum1(map: &Tensor) -> Option<Vec<f64>> {
    let total = map.sum();
    (total != 0.0 && total.is_finite()).then(|| map.data().iter().map(|v| v / total).collect())
}

/// True when no feature row of the sum-normalized map carries exactly the
/// uniform share 1/D. An all-zero map cannot be normalized and fails.
pub fn spatiality_check(map: &Tensor) -> bool {
    let (d, t) = (map.shape()[0], map.shape()[1]);
    let Some(v) = sum1(map) else { return false };
    (0..d).all(|r| (v[r * t..(r + 1) * t].iter().sum::<f64>() - 1.0 / d as f64).abs() > UNIFORM_TOL)
}

/// True when no time column carries exactly the uniform share 1/T.
pub fn temporality_check(map: &Tensor) -> bool {
    let (d, t) = (map.shape()[0], map.shape()[1]);
    let Some(v) = sum1(map) else { return false };
    (0..t).all(|c| ((0..d).map(|r| v[r * t + c]).sum::<f64>() - 1.0 / t as f64).abs() > UNIFORM_TOL)
}

pub fn spatiotemporality_check(map: &Tensor) -> bool {
    spatiality_check(map) && temporality_check(map)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatiotemporalRates {
    pub spatiality: f64,
    pub temporality: f64,
    pub spatiotemporality: f64,
}

/// Pass rates of the three checks over a set of maps.
pub fn spatiotemporal_rates<'a>(maps: impl IntoIterator<Item = &'a Tensor>) -> SpatiotemporalRates {
    let (mut n, mut s, mut t, mut st) = (0usize, 0usize, 0usize, 0usize);
    for m in maps {
        let (a, b) = (spatiality_check(m), temporality_check(m));
        n += 1;
        s += a as usize;
        t += b as usize;
        st += (a && b) as usize;
    }
    if n == 0 {
        return SpatiotemporalRates::default();
    }
    let n = n as f64;
    SpatiotemporalRates {
        spatiality: s as f64 / n,
        temporality: t as f64 / n,
        spatiotemporality: st as f64 / n,
    }
}
