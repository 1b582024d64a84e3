//! Error type shared by the whole toolkit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or structural argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two operands live on different grids. Grids are never silently
    /// resampled; mismatches always surface here.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A file did not conform to the supported NIfTI-1 subset. `field` names
    /// the offending header field or payload section.
    #[error("{path}: format error in `{field}`: {detail}")]
    Format {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    /// Input carries no usable signal (e.g. a constant volume).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An error raised while processing one subject of a population, with
    /// the subject id attached.
    #[error("subject '{subject}': {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Attach a subject id to an error bubbling out of per-subject work.
    pub fn for_subject(self, subject: &str) -> Error {
        Error::Subject {
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through `Subject` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Subject { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
