//! Supervised fine-tuning with the backtrack-aware loss mask.
//!
//! Every sample is encoded as `[BOS] prompt completion [EOS]` together with a
//! per-token mask. Prompt tokens and the erroneous step of a backtrack sample
//! are masked out; the correct prefix, the `<backtrack>` token and, for
//! optimal samples, the full solution plus EOS are trained on. The loss is the
//! mean NLL over unmasked tokens of a batch.

mod batch;
mod loss;
mod run;

pub use batch::{encode_all, encode_sample, EncodedSample, MaskedBatch};
pub use loss::{batch_loss, composite_loss, masked_nll, LossOutput, LossParts};
pub use run::{dataset_loss, train, write_metrics_csv, Adam, EpochMetric, Schedule, StepMetric, TrainConfig, TrainReport};

use thiserror::Error;

use crate::lm::LmError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch has no unmasked positions")]
    EmptyMask,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("sample {0}: {1}")]
    MalformedSample(String, String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
