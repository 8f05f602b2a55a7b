//! Masked spatiotemporal autoencoder for irregularly sampled PDE fields.
//!
//! A convolutional autoencoder compresses each field snapshot into a latent
//! vector; a masked transformer reconstructs the full latent sequence
//! (observed, missing and future steps) in a single pass; the decoder maps
//! it back to physical space. The crate also ships the finite-difference
//! solvers that generate training data, an autoregressive LSTM baseline,
//! field-quality metrics and the command-line driver.

pub mod cli;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod sim;
pub mod tensor;
pub mod train;
