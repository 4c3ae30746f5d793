use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis has the wrong extent. `axis` names the offending axis.
    #[error("shape mismatch on axis {axis}: {msg}")]
    Shape { axis: usize, msg: String },
    /// Invalid configuration (bad parameter value, unknown mode, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called out of order (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    /// A requested measurement is undefined (e.g. zero denominator).
    #[error("undefined measurement: {0}")]
    Undefined(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(axis: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            axis,
            msg: msg.into(),
        }
    }
}
