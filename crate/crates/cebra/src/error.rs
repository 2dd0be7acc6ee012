use std::io;
use std::path::{Path, PathBuf};

/// Failures of the IO and command-line layer.
///
/// [`Error::exit_code`] separates problems with what the user asked for
/// (bad flags, configs, input files, contexts missing for a mode) from
/// failures while carrying it out.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] cebra_core::Error),

    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        use cebra_core::Error as C;
        match self {
            Error::Validation(_) | Error::Format { .. } => 2,
            Error::Core(
                C::ShapeMismatch { .. }
                | C::InvalidConfig(_)
                | C::InvalidSession(_)
                | C::EmptyRange(_)
                | C::OutOfRange { .. }
                | C::SingletonClass { .. }
                | C::Unsupported(_),
            ) => 2,
            Error::Io { .. } | Error::Core(_) | Error::Runtime(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}
