use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine's library surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("voxel index ({i}, {j}, {k}) out of range for grid of resolution {resolution}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        resolution: usize,
    },

    #[error("need at least {required} views, got {available}")]
    FewerThanKViews { required: usize, available: usize },

    #[error("image of {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("backward invoked without a matching forward tape")]
    TapeMissing,

    #[error("forward pass is not deterministic (max deviation {deviation:e})")]
    NonDeterministicForward { deviation: f64 },

    #[error("training diverged at iteration {iteration}: {reason}")]
    DivergenceDetected { iteration: usize, reason: String },

    #[error("malformed PLY at {location}: {message}")]
    MalformedPly { location: String, message: String },

    #[error("malformed {kind} file {path}: {message}")]
    MalformedFile {
        kind: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
