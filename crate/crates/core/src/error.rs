use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied a value outside an operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file or text did not follow the expected layout.
    #[error("format error{}: {message}", location(.path, .line))]
    Format {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    /// Training produced a non-finite objective or parameter.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!(" at {}:{}", p.display(), l),
        (Some(p), None) => format!(" in {}", p.display()),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            line: None,
            message: msg.into(),
        }
    }

    pub(crate) fn format_at(path: Option<&std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.map(|p| p.to_path_buf()),
            line: Some(line),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attach a file path to a format error that was raised while parsing text.
    pub fn with_path(self, p: &std::path::Path) -> Self {
        match self {
            Error::Format { path: None, line, message } => Error::Format {
                path: Some(p.to_path_buf()),
                line,
                message,
            },
            other => other,
        }
    }
}
