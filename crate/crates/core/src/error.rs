use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Longitudinal speed is below the slip-angle guard.
    #[error("guard violation: vx = {vx} m/s is below the {guard} m/s guard")]
    GuardViolation { vx: f64, guard: f64 },

    #[error("parse error at row {row}: {msg}")]
    ParseError { row: usize, msg: String },

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("non-uniform sampling at row {row}: spacing {spacing} s, expected {expected} s")]
    NonUniformSampling {
        row: usize,
        spacing: f64,
        expected: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("cholesky failure: {0}")]
    CholeskyFailure(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("no residual model registered for horizon {0}")]
    MissingHorizonModel(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in CLI error lines and FFI error codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::GuardViolation { .. } => "GuardViolation",
            Error::ParseError { .. } => "ParseError",
            Error::SchemaError(_) => "SchemaError",
            Error::NonUniformSampling { .. } => "NonUniformSampling",
            Error::InsufficientData(_) => "InsufficientData",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::CholeskyFailure(_) => "CholeskyFailure",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::MissingHorizonModel(_) => "MissingHorizonModel",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::ConfigError(_) => "ConfigError",
            Error::Io { .. } => "Io",
        }
    }
}
