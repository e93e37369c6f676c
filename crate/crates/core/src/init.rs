//! Parameter initialisation.

use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (1.0 / fan_in as f64).sqrt();
    uniform(shape, limit, rng)
}

pub fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// LSTM gate bias: zeros except the forget gate, which starts at 1.
pub fn lstm_bias(hidden: usize) -> Tensor {
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden].fill(1.0);
    Tensor::vector(&b)
}
