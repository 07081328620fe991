//! Error type shared by all qedge-core modules.

use thiserror::Error;

/// Errors produced by quantization codecs, kernels, the decoder, model I/O
/// and the metrics engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data contains NaN or infinity.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Tensor shape incompatible with a format's block layout.
    #[error("layout error: {0}")]
    Layout(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("KV cache full: capacity {capacity} positions already used")]
    CacheFull { capacity: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes: not a model container")]
    BadMagic,

    #[error("unsupported container version {0}")]
    BadVersion(u32),

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("unknown tensor format id {0}")]
    UnsupportedFormat(u8),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
