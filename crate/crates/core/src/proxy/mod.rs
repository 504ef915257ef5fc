//! The proxy classifier: vocabulary, encoder, training and persistence.

mod io;
mod model;
pub mod tensor;
mod train;
mod vocab;

use thiserror::Error;

pub use io::{from_bytes, load_model, save_model, to_bytes, FORMAT_VERSION};
pub use model::{argmax, EncoderLayer, GradientTarget, Parameters, ProxyConfig, ProxyModel};
pub use tensor::Matrix;
pub use train::{prepare_examples, train, train_tokenized, TrainConfig, TrainOutcome};
pub use vocab::{TokenizedInput, Vocab, CONTINUATION, MASK_ID, PAD_ID, SPECIALS, UNK_ID};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("label index {0} is outside the label set")]
    LabelOutOfRange(usize),
    #[error("label {0:?} is not in the model's label set")]
    UnknownLabel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("model file checksum mismatch (truncated or corrupted)")]
    ChecksumMismatch,
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
