use std::path::PathBuf;

use mobilex_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("{0}")]
    InvalidData(String),

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("learnable tensor `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite weights in `{0}` after update")]
    NonFiniteWeights(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Coarse failure classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Config(_)
            | Error::MissingTensor(_)
            | Error::ShapeMismatch { .. }
            | Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::CorruptCheckpoint(_) => Category::Config,
            Error::Data { .. }
            | Error::InvalidData(_)
            | Error::EmptyManifest
            | Error::NoValidPixels
            | Error::Image(_) => Category::Data,
            Error::Tensor(_) | Error::MissingGradient(_) | Error::NonFiniteLoss { .. } | Error::NonFiniteWeights(_) => {
                Category::Numeric
            }
            Error::Io(_) => Category::Io,
        }
    }
}
