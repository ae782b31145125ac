use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, sizes, counts).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 numeric, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract(_) | Error::Domain(_) => 2,
            Error::Numeric(_) | Error::Training { .. } | Error::Degenerate(_) => 3,
            Error::Load(_) | Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
