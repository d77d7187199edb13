use thiserror::Error;

/// Errors raised by grid construction, operator assembly, caching and time integration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("geometry error at x = ({x1}, {x2}), eps = {eps}: {msg}")]
    Geometry {
        x1: f64,
        x2: f64,
        eps: f64,
        msg: String,
    },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("resource guard: {0}")]
    Resource(String),

    #[error("consistent initialization failed: {msg} (residual {residual:e})")]
    Initialization { msg: String, residual: f64 },

    #[error("integration failed at t = {t}: {msg}")]
    Integration {
        t: f64,
        msg: String,
        last_rho: Vec<f64>,
    },

    #[error("operator cache: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
