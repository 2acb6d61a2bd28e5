//! Transformer decoder modules and the builders that wire them together.

use thiserror::Error;

use crate::autograd::TensorError;

mod attention;
mod decoder;
pub mod init;
mod layer;
mod linear;

pub use attention::{attention_mask, AttentionContext, MultiHeadAttention};
pub use decoder::{
    build_decoder, build_lora_decoder, DecoderConfig, LoraConfig, LoraTarget, NamedTensor, OutputHead, TokenBatch,
    TransformerDecoder,
};
pub use layer::{FeedForward, RmsNorm, TransformerLayer};
pub use linear::{Linear, LoRALinear, ParamMap, Projection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("state mismatch: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelError {
    pub fn into_tensor_error(self) -> TensorError {
        match self {
            ModelError::Tensor(e) => e,
            other => TensorError::Invalid { op: "checkpoint", reason: other.to_string() },
        }
    }
}
