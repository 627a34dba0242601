use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("calibration failure: {0}")]
    Calibration(String),

    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at iteration {iteration}; last good checkpoint written")]
    Diverged { iteration: usize },
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(offset: u64, source: std::io::Error) -> Self {
        Error::Io { offset, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
