use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing required configuration keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),

    #[error("malformed configuration: {0}")]
    ConfigSyntax(String),

    #[error("cannot read {path}: {source}")]
    ReadFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    WriteFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed dataset line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::MissingKeys(_) | Error::ConfigSyntax(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
