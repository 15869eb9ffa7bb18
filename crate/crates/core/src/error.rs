use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input whose shape or value range does not satisfy an operation's contract.
    #[error("rejected input: {0}")]
    Rejected(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A non-finite value showed up during a forward or backward pass.
    #[error("divergence at {stage}: {detail}")]
    Divergence { stage: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },

    #[error("not a bitstream: {0}")]
    NotABitstream(String),

    #[error("model id mismatch: bitstream expects {expected:016x}, model is {actual:016x}")]
    ModelMismatch { expected: u64, actual: u64 },

    #[error("entropy decoding failed: {0}")]
    Decode(String),

    #[error("symbol {0} outside the codable range")]
    Unencodable(i64),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::Rejected(msg.into())
    }

    pub(crate) fn divergence(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Divergence {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}
