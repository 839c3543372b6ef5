use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes of the
/// individual subsystems so callers can branch on what went wrong.
#[derive(Debug, Error)]
pub enum Error {
    /// An input value fell outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or layer shapes do not chain together.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration is internally inconsistent or unsatisfiable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Underlying filesystem failure.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact (checkpoint, image file, manifest) is malformed.
    /// `offset` is the byte position where parsing gave up.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An API contract between modules was violated (e.g. a stale
    /// backward cache).
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
