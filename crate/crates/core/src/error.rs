use thiserror::Error;

/// Errors surfaced by the tensor engine, model layers, and data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("gradient for parameter `{name}` is non-finite")]
    NonFiniteGradient { name: String },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("gradient supplied for frozen parameter `{name}`")]
    FrozenGradient { name: String },

    #[error("missing gradient for learnable parameter `{name}`")]
    MissingGradient { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },

    #[error("duplicate parameter `{name}`")]
    DuplicateParam { name: String },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("word `{word}` is not in the grammar vocabulary")]
    OutOfGrammar { word: String },

    #[error("answer mask has no true positions")]
    EmptyAnswerMask,

    #[error("assembled sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("zero-norm vector in {op}")]
    ZeroNorm { op: &'static str },

    #[error("checkpoint error: {reason}")]
    Checkpoint { reason: String },

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("volume error: {reason}")]
    Volume { reason: String },

    #[error("config error: {reason}")]
    Config { reason: String },

    #[error("loss is not deterministic across repeated evaluations")]
    NonDeterministicLoss,

    #[error("invalid argument: {reason}")]
    InvalidArgument { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn checkpoint(reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            reason: reason.into(),
        }
    }

    pub fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            reason: reason.into(),
        }
    }

    pub fn volume(reason: impl Into<String>) -> Self {
        Error::Volume {
            reason: reason.into(),
        }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config {
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
