//! Dense tensors, direct-loop kernels and tape-based reverse-mode differentiation.

mod dense;
pub(crate) mod kernels;
pub mod ops;
mod tape;

pub use dense::Tensor;
pub use kernels::Padding;
pub use ops::{BatchNormState, LstmWeights};
pub use tape::{BatchMoments, Gradients, NormMode, Tape, Var};
