//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DhaError>;

#[derive(Debug, Error)]
pub enum DhaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("corruption rate {0} is outside [0, 1]")]
    RateOutOfRange(f64),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("token id {token} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("missing component {0} in fusion input")]
    MissingComponent(u32),

    #[error("negative rating {0}")]
    NegativeRating(f64),

    #[error("duplicate interaction for user {user}, item {item}")]
    DuplicateEntry { user: u32, item: u32 },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("embedding header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("embedding row at line {line} has {found} values, header declares {expected}")]
    DimMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("split ratio {0} is outside (0, 1)")]
    RatioOutOfRange(f64),

    #[error("unknown field: {0}")]
    UnknownField(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error(
        "checkpoint format version {found} is not supported (this build reads version {supported})"
    )]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint checksum mismatch (file is truncated or corrupted)")]
    ChecksumMismatch,

    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unknown user {0}")]
    UnknownUser(u32),

    #[error("no relevant items for user")]
    EmptyRelevant,

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("gradient check failed: tensor {tensor} max relative error {err:.3e}")]
    GradientCheckFailed { tensor: String, err: f64 },
}

impl DhaError {
    /// Stable process exit code contract: 0 success, 1 usage/config error,
    /// 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use DhaError::*;
        match self {
            ConfigInvalid(_) | ConfigMismatch(_) | UnknownField(_) | RatioOutOfRange(_)
            | RateOutOfRange(_) => 1,
            EmptyData(_)
            | MissingFile(_)
            | MalformedLine { .. }
            | HeaderMismatch(_)
            | DimMismatch { .. }
            | Io(_)
            | VersionMismatch { .. }
            | ChecksumMismatch
            | BadMagic
            | UnknownUser(_)
            | TokenOutOfVocab { .. }
            | NegativeRating(_)
            | DuplicateEntry { .. }
            | EmptyRelevant => 2,
            DimensionMismatch(_)
            | ShapeMismatch(_)
            | NotPositiveDefinite { .. }
            | MissingComponent(_)
            | IndexOutOfRange(_)
            | NonFinite { .. }
            | GradientCheckFailed { .. } => 3,
        }
    }
}
