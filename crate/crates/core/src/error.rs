use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the tracking engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid channel spec: {0}")]
    InvalidChannelSpec(String),

    #[error("degenerate geometry{}: {reason}", frame.map(|f| format!(" at frame pair {f}")).unwrap_or_default())]
    DegenerateGeometry { frame: Option<usize>, reason: String },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite registration energy at iteration {0}")]
    NonFiniteEnergy(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

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

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Attaches a frame-pair index to a geometry error.
    pub fn at_frame(self, index: usize) -> Self {
        match self {
            Error::DegenerateGeometry { reason, .. } => Error::DegenerateGeometry {
                frame: Some(index),
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
