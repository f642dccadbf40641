use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: line {line}, column {column}: {message}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    /// A file that exists but does not follow its format.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: cannot decode image: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] crowdcount_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            return Error::MissingFile(path.to_path_buf());
        }
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, err: &serde_json::Error) -> Self {
        Error::Json {
            path: path.to_path_buf(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// 2 for usage problems (flags, configuration, missing inputs), 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use crowdcount_core::Error as Core;
        match self {
            Error::Usage(_) | Error::MissingFile(_) => 2,
            Error::Core(Core::InvalidConfig(_) | Core::CropTooLarge { .. }) => 2,
            _ => 1,
        }
    }
}
