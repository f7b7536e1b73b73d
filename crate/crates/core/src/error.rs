use std::path::PathBuf;

/// Errors raised while reading an adapter container or layer manifest.
///
/// Every variant names the tensor or manifest entry at fault.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {tensor}: unsupported dtype {dtype} (only F32 is accepted)")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor {tensor}: byte range {begin}..{end} does not match shape {shape:?}")]
    ShapeMismatch {
        tensor: String,
        shape: Vec<usize>,
        begin: usize,
        end: usize,
    },
    #[error("tensor {tensor}: data offsets overlap the previous tensor {previous}")]
    OverlappingOffsets { tensor: String, previous: String },
    #[error("tensor {tensor}: data offsets leave a gap in the payload")]
    PayloadGap { tensor: String },
    #[error("payload has {extra} trailing bytes after tensor {tensor}")]
    TrailingBytes { tensor: String, extra: usize },
    #[error("{tensor} missing")]
    MissingTensor { tensor: String },
    #[error("tensor {tensor}: {reason}")]
    InvalidTensor { tensor: String, reason: String },
    #[error("manifest entry {entry}: {reason}")]
    Manifest { entry: String, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
