use thiserror::Error;

/// Errors surfaced by the tracking library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("hessian repair failed: {0}")]
    HessianRepair(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::Dimension {
                what,
                expected,
                actual,
            })
        }
    }

    /// True for errors caused by invalid user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dimension { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
