//! Explainable multivariate time-series classification.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), three
//! convolutional classifiers ([`models`]: MTEX-CNN, XCM and the temporally
//! gated TSEM), ten class-activation-map attribution methods
//! ([`attribution`]), the interpretability metrics used to judge them
//! ([`metrics`]) and dataset tooling ([`data`]).
//!
//! See the guide under `book/` for a walk through each part.

pub mod attribution;
pub mod data;
mod error;
pub mod init;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    mod attribution {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
