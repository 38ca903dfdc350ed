use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller input: out-of-range token ids, empty sequences, violated preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// A draft, mask or distribution list that does not describe a consistent token tree.
    #[error("structural error: {0}")]
    Structural(String),

    /// Experiment or CLI configuration problem, with the offending field.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed data file (corpus, pool or model file).
    #[error("data error in {}: {message}", path.display())]
    Data { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Binary format problem (bad magic, unsupported version, truncated record).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Input(_)
            | Error::Structural(_)
            | Error::Data { .. }
            | Error::Io { .. }
            | Error::Format(_) => 3,
        }
    }
}
