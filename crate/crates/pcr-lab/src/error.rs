use thiserror::Error;

/// Crate-wide error type. Parameter and config errors map to CLI exit code 2,
/// assertion failures (reported by the suites, not as `Err`) to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument to a library operation.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Non-finite or otherwise unusable numeric data.
    #[error("bad data: {0}")]
    Data(String),

    /// A fit that cannot be formed (singular system with the threshold not
    /// triggered). Unreachable for spectra with strictly positive eigenvalues;
    /// kept as a defensive branch.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Configuration file problems (parse or validation).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
