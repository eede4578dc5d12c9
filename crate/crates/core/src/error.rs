use thiserror::Error;

/// Errors produced by the fitting toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("view {view} renders no pixels")]
    EmptyRender { view: usize },
    #[error("views {a} and {b} do not overlap (covisible fraction {fraction:.4})")]
    NoOverlap { a: usize, b: usize, fraction: f64 },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl std::fmt::Display, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
