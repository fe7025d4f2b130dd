use thiserror::Error;

pub type Result<T, E = QcdError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QcdError {
    /// A value fell outside the support of a density or a probability was
    /// outside the open unit interval.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed observation at slot {slot}: {reason}")]
    MalformedObservation { slot: u64, reason: String },

    #[error("non-finite statistic increment at slot {slot}: {value}")]
    Numeric { slot: u64, value: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("threshold calibration failed: {0}")]
    Calibration(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl QcdError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        QcdError::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        QcdError::Domain(msg.into())
    }
}

impl From<std::io::Error> for QcdError {
    fn from(e: std::io::Error) -> Self {
        QcdError::Io(e.to_string())
    }
}

impl From<csv::Error> for QcdError {
    fn from(e: csv::Error) -> Self {
        QcdError::Io(e.to_string())
    }
}
