use alloc::string::String;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("attention row {row} has no visible positions")]
    DegenerateMask { row: usize },
    #[error("empty target set")]
    EmptyTargets,
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty input text")]
    EmptyInput,
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown relationship `{0}`")]
    UnknownRelationship(String),
    #[error("duplicate document id `{0}` in batch")]
    DuplicateDoc(String),
    #[error("unknown document `{0}`")]
    UnknownDoc(String),
    #[error("prompt scheme mismatch: checkpoint trained with {expected}, requested {requested}")]
    SchemeMismatch { expected: String, requested: String },
    #[error("training diverged at step {step}: loss {loss} (record {record})")]
    Diverged { step: usize, loss: f64, record: String },
    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
