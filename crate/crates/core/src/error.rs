use std::path::PathBuf;

/// Errors produced anywhere in the depth pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Camera intrinsics or rig extrinsics are missing or malformed.
    #[error("calibration error: {0}")]
    Calibration(String),
    /// An input value lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Shapes, planes or stages of two inputs do not fit together.
    #[error("interface error: {0}")]
    Interface(String),
    /// A stored artifact failed its integrity check.
    #[error("corruption error: {0}")]
    Corruption(String),
    /// A frozen backbone was modified or a loss diverged.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Configuration could not be read or is invalid.
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
