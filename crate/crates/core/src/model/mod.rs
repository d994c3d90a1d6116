//! Exposure fusion network: configuration, parameters, forward pass,
//! training loss, and the desk-scale training loop.

pub mod config;
pub mod init;
pub mod loss;
pub mod network;
pub mod train;

pub use config::{AttentionKind, EafnetConfig};
pub use init::{init_params, param_specs};
pub use loss::{attach_loss, LossParts};
pub use network::{end_to_end_case, Eafnet, Forward, ForwardTrace};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use crate::radiometry::RadiometryError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter store is missing tensor {0}")]
    MissingParam(String),
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter store contains unknown tensor {0}")]
    UnexpectedParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
}
