//! Numerical core of the imind dual-decoding pipeline.
//!
//! Everything here is `no_std` with `alloc`: a small reverse-mode autograd
//! engine, the synthetic data generator, preprocessing, the masked-autoencoder
//! encoder, basis disentanglement, the biometric and semantic heads,
//! attribution and evaluation metrics. File formats and the CLI live in the
//! `imind` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attribution;
pub mod autograd;
pub mod baselines;
pub mod disentangle;
pub mod dual;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mae;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
