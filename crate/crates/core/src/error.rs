use thiserror::Error;

/// Errors produced by the ndssm engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unsupported enumeration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument is outside the mathematical domain of the operation
    /// (zero sizes, shape mismatches, non-positive resolutions).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical failure: poles, overflow, non-finite intermediate values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A size guard was exceeded.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// An API was used out of order (for example backward without retained activations).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed container, checkpoint or config file.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A failure inside one stage of a multi-stage schedule.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl Error {
    /// Wraps this error with the index of the schedule stage it came from.
    pub fn in_stage(self, stage: usize) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
