//! Tokenizer, transformer and decoding primitives.

mod checkpoint;
mod decode;
mod model;
mod scalar;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use decode::{
    beam_search, greedy, sample, sample_many, score_batch, score_completion, Generation, SequenceScore,
};
pub use model::{log_softmax_rows, KvCache, Layout, LayerSpans, Model, ModelConfig, Span, Tape};
pub use scalar::{gemm, Scalar, View};
pub use vocab::{TokenId, Vocab, BACKTRACK, BOS, EOS, PAD};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(TokenId),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("cannot score an empty completion")]
    EmptyCompletion,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// `[BOS] ∘ encode(prompt)`: the conditioning prefix fed to the model.
pub fn encode_prompt(vocab: &Vocab, prompt: &str) -> Result<Vec<TokenId>, LmError> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(prompt)?);
    Ok(ids)
}
