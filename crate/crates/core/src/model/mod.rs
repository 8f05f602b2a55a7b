//! Network definitions: the convolutional autoencoder, the masked latent
//! transformer and the latent LSTM baseline.
//!
//! Parameters live in [`ParamSet`]s and are recorded on a [`Tape`] per
//! forward pass, so the same weights can be evaluated in `f32` or `f64`.
//!
//! [`Tape`]: crate::tensor::Tape

mod cae;
mod checkpoint;
mod lstm;
mod params;
mod transformer;

pub use cae::{Cae, CaeConfig};
pub use checkpoint::Checkpoint;
pub use lstm::{interpolate_missing, LatentLstm, LstmConfig, LstmState};
pub use params::{
    fan_in_uniform, normal, xavier_uniform, Bound, LayerNorm, Linear, ParamId, ParamSet, LAYER_NORM_EPS,
};
pub use transformer::{embedding_table, positional_embedding, AttentionBlock, Prediction, Pstmae, TransformerConfig};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[cfg(test)]
mod tests;
