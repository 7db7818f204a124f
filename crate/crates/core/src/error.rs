use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors returned by the storage engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{}: already exists", .0.display())]
    AlreadyExists(PathBuf),

    #[error("storage error ({context}): {source}")]
    Storage {
        context: String,
        #[source]
        source: io::Error,
    },

    /// The log write or its sync barrier failed; the in-memory state was not touched.
    #[error("durability error: {0}")]
    Durability(#[source] io::Error),

    /// A blob reference points into a generation that has since been collected.
    #[error("blob generation {requested} is gone (current generation is {current})")]
    Gone { requested: u32, current: u32 },

    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn storage(context: impl Into<String>, source: io::Error) -> Self {
        Error::Storage {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Attaches a context string to an I/O result.
pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::storage(context(), e))
    }
}
