use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad IDX magic word 0x{0:08X} (expected 0x00000801 or 0x00000803)")]
    BadMagic(u32),
    #[error("IDX payload truncated: header promises {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX payload has trailing bytes: header promises {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("invalid IDX tensor: {0}")]
    InvalidTensor(String),

    #[error("image count {images} does not match label count {labels}")]
    SizeMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..{num_classes}")]
    LabelOutOfRange { index: usize, label: u8, num_classes: usize },
    #[error("expected image tensor dims [N, 28, 28], got {0:?}")]
    BadImageShape(Vec<usize>),
    #[error("training split has degenerate standard deviation {0:e}; refusing to normalize")]
    DegenerateStd(f64),
    #[error("normalization statistics must come from a training split")]
    NotTrainSplit,
    #[error("seed size {seed_size} is not divisible by the {num_classes} classes")]
    IndivisibleSeedSize { seed_size: usize, num_classes: usize },
    #[error("seed size {seed_size} exceeds the {available} available samples")]
    SeedSizeTooLarge { seed_size: usize, available: usize },

    #[error("non-finite activation after layer `{layer}`")]
    NonFiniteActivation { layer: &'static str },
    #[error("forward cache does not match this backward call: {0}")]
    CacheMismatch(String),
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("epoch prediction buffer incomplete: {missing} samples have no prediction")]
    IncompleteEpochBuffer { missing: usize },
    #[error("ensemble has no completed updates; targets are undefined")]
    ZeroUpdates,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("episode aborted at epoch {epoch}: {source}")]
    EpisodeAborted {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dataset `{dataset}` not found: missing {path}")]
    MissingDataset { dataset: String, path: PathBuf },
    #[error("checksum mismatch for {path}: manifest has {expected}, file has {actual}")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint format version {0}")]
    CheckpointVersion(u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
