//! Error taxonomy shared by every module.
//!
//! Validation problems (bad flags, bad config, bad data) exit the CLI with
//! code 1; runtime failures (I/O, corrupt files, diverged training) with 2.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 1 for validation errors, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Config(_)
            | Error::Data(_)
            | Error::Registry(_)
            | Error::Routing(_)
            | Error::Injection(_)
            | Error::Usage(_) => 1,
            Error::Numeric(_)
            | Error::State(_)
            | Error::Check(_)
            | Error::Format { .. }
            | Error::Training { .. }
            | Error::Io { .. } => 2,
        }
    }
}
