use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor op failed: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("sample `{id}`: missing {what} file {path}")]
    MissingFile {
        id: String,
        what: &'static str,
        path: PathBuf,
    },

    #[error("sample `{id}`: invalid scribble label value {value} at (row {row}, col {col})")]
    BadLabel {
        id: String,
        value: u8,
        row: usize,
        col: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input size {height}x{width} is not divisible by {required}")]
    Indivisible {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("descriptor {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss term `{term}` (value {value})")]
    NonFinite { term: &'static str, value: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::MissingFile { .. } => "missing_file",
            Error::BadLabel { .. } => "bad_label",
            Error::Shape(_) => "shape",
            Error::Indivisible { .. } => "indivisible",
            Error::Invalid(_) => "invalid",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::Empty(_) => "empty",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
            Error::Format { .. } => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
