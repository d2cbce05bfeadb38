use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },

    #[error("fetch failed: {0}")]
    Fetch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }

    /// Strips any `Layer` wrapping and returns the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
