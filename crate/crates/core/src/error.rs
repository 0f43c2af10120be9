//! Error taxonomy shared by every module. Variants map one-to-one onto the
//! CLI exit-code classes, so keep them coarse.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcaeError {
    /// Tensor shape disagreement detected at a call boundary.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration; raised at construction time, never mid-forward.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset loading or decoding failure.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (NaN/Inf encountered, matrix not PSD, etc).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint serialization problems, each cause reported distinctly.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// Training pipeline misuse, e.g. running phases out of order.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Distinct checkpoint failure causes; tests assert on the variant.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("unsupported format_version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("tensor blob truncated: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: u64, found: u64 },

    #[error("checksum mismatch for tensor '{name}'")]
    ChecksumMismatch { name: String },

    #[error("checkpoint does not match the requested model config: {0}")]
    ConfigMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DcaeError>;

impl DcaeError {
    /// Stable process exit code for each error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DcaeError::Config(_) | DcaeError::Shape(_) => 2,
            DcaeError::Data(_) => 3,
            DcaeError::Numeric(_) => 4,
            DcaeError::Checkpoint(_) => 5,
            DcaeError::Pipeline(_) | DcaeError::Io(_) => 1,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> DcaeError {
    DcaeError::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> DcaeError {
    DcaeError::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> DcaeError {
    DcaeError::Data(msg.into())
}

pub(crate) fn numeric_err(msg: impl Into<String>) -> DcaeError {
    DcaeError::Numeric(msg.into())
}
