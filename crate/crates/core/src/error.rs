use thiserror::Error;

use crate::geometry::Point;

/// Errors raised by parameter construction, fields, quadrature and operators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("fractional order s = {0} is outside (0, 1)")]
    InvalidOrder(f64),

    #[error("dimension n = {0} is not supported (expected 1, 2 or 3)")]
    InvalidDimension(usize),

    #[error("non-integrable singularity: exponent {0} <= -1")]
    NonIntegrable(f64),

    #[error("tail is not integrable: envelope power {power} with kernel decay {kernel_decay} in dimension {dim}")]
    NonIntegrableTail {
        power: f64,
        kernel_decay: f64,
        dim: usize,
    },

    #[error("non-finite value {value} while evaluating {what} at {point:?}")]
    NonFinite {
        what: String,
        point: Point,
        value: f64,
    },

    #[error("field `{field}` is singular at {point:?}")]
    SingularPoint { field: String, point: Point },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cache store: {0}")]
    CacheStore(String),

    #[error("unknown field id `{0}`")]
    UnknownField(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attaches a description of the enclosing computation to an error.
pub trait ResultExt<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::Context {
            context: ctx(),
            source: Box::new(e),
        })
    }
}
