use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed PGM file {path}: {reason}")]
    Pgm { path: PathBuf, reason: String },
    #[error("frame for wavelength {0} nm is missing")]
    MissingFrame(u32),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unknown mode string {0:?}")]
    UnknownMode(String),
    #[error("wavelength {0} nm listed more than once")]
    DuplicateWavelength(u32),
    #[error("invalid band set: {0}")]
    InvalidBandSet(String),
    #[error("crop rectangle ({x},{y},{w},{h}) does not fit a {width}x{height} frame")]
    OutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("white reference band {0} nm is degenerate (all zero)")]
    DegenerateReference(u32),
    #[error("band {0} nm has zero mean in the reference")]
    ZeroMeanBand(u32),
    #[error("expected {expected} mode samples, found {found}")]
    ModeMismatch { expected: String, found: String },
    #[error("sample {0:?} has no partner in the other mode")]
    UnpairedSample(String),
    #[error("row count mismatch for sample {sample:?}: {left} vs {right}")]
    RowCountMismatch { sample: String, left: usize, right: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),
    #[error("empty data")]
    EmptyData,
    #[error("distribution bin edges differ")]
    EdgeMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("linear algebra failure: {0}")]
    Numerical(String),
    #[error("protocol timeout after {steps} steps waiting for {waiting_for}")]
    Timeout { steps: u64, waiting_for: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
