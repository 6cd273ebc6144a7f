//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shape violations: mismatched dimensions, non-integral
    /// convolution output sizes, rank errors.
    #[error("shape error: {0}")]
    Shape(String),

    /// A precondition on an argument was violated (bad sigma, zero fan-in,
    /// inverted ranges, invalid fractions).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed bytes in one of the on-disk formats (PNM, manifest CSV,
    /// checkpoint, config).
    #[error("format error: {0}")]
    Format(String),

    /// Dataset-level problems: missing classes, empty splits, unreadable
    /// sample files.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: NaN/Inf where the contract forbids it.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Otsu's criterion is identically zero: the image has a single gray level.
    #[error("degenerate histogram: image has a single distinct gray level")]
    DegenerateHistogram,

    /// A mask operation that requires foreground found none.
    #[error("no foreground: mask has no foreground pixels")]
    NoForeground,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
