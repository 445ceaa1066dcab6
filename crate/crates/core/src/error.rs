use thiserror::Error;

/// Errors raised by the regression engine and the feature pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Array dimensions do not line up.
    #[error("input shape error: {0}")]
    Shape(String),

    /// Inconsistent model or network configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or empty input data.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed or inconsistent file content.
    #[error("data error: {0}")]
    Data(String),

    /// Factorization failure, non-finite value or degenerate statistic.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
