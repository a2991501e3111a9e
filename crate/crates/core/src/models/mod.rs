//! Model A and Model B: knowledge-augmented VQA classifiers built on the
//! tensor core.

mod checkpoint;
mod config;
mod forward;
mod params;


pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC};
pub use config::{param_count, ModelConfig, Variant, PRESET_NAMES};
pub use forward::{
    forward_batch, forward_model_a, forward_model_b, predict_batch, BatchForward, ForwardOutput,
    ModelBatch, SampleInput,
};
pub use params::{block_names, layout, BoundParams, Init, ModelParams, ParamSpec};

use crate::tensorcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint does not start with the KLITE1 magic")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint parameter block is {found} bytes, config needs {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
