use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("target id {index} out of vocabulary of size {vocab}")]
    IndexOutOfVocab { index: usize, vocab: usize },

    #[error("row id {index} out of range for table with {rows} rows")]
    IdOutOfRange { index: usize, rows: usize },

    #[error("label {0} is not 0 or 1")]
    InvalidLabel(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeAlreadyConsumed,

    #[error("function under check is not deterministic: {first} vs {second}")]
    NonDeterministicFunction { first: f64, second: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
