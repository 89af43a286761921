use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument to an operation (bad index, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint or archive serialization problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset, manifest, or image problem.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numerical failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
