use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("reduction over an empty last dimension")]
    EmptyDimension,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape has no parameter store attached")]
    NoParameters,

    #[error("CTC target needs at least {needed} frames but only {available} are valid")]
    Infeasible { needed: usize, available: usize },

    #[error("CTC layer {layer}: {source}")]
    LayerLoss {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("CTC target contains the blank id {0}")]
    BlankInTarget(usize),

    #[error("enumeration bound exceeded: T={frames}, V={vocab} (limits T<=8, V<=5)")]
    EnumerationBound { frames: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {0} is not valid here")]
    InvalidToken(usize),

    #[error("utterance {utt} has no translation into language {lang}")]
    MissingTranslation { utt: u32, lang: usize },

    #[error("input has {frames} frames, fewer than the downsampling factor {factor}")]
    InputTooShort { frames: usize, factor: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("vocabulary mismatch between checkpoint and corpus")]
    VocabularyMismatch,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
