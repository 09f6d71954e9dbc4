//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building filter banks, running the
/// network, or driving the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is missing, malformed, or inconsistent.
    /// The message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data could not be decoded (image files, checkpoints, dumps).
    #[error("data error: {0}")]
    Data(String),

    /// An API was used out of order, e.g. backward called twice on one tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric guard tripped (non-finite loss, empty reduction, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: config problems exit 1, everything
    /// else exits 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
