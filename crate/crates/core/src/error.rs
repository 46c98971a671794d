use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("integration diverged at t = {last_time}: {reason}")]
    Divergence { last_time: f64, reason: String },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("degenerate regression: {0}")]
    Degenerate(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("schema violation, offending keys: {}", .0.join(", "))]
    Schema(Vec<String>),

    #[error("window {window}: {source}")]
    InWindow {
        window: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_window(self, window: usize) -> Self {
        Error::InWindow {
            window,
            source: Box::new(self),
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
