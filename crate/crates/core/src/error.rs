use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined by an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid model, layer or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (manifests, images).
    #[error("data error{}: {msg}", location(.path, .line))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        msg: String,
    },

    /// Corrupt or incompatible checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// NaN/Inf, failed gradient checks, non-deterministic forwards.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!(" in {} line {}", p.display(), l),
        (Some(p), None) => format!(" in {}", p.display()),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a file path to a data error that does not have one yet.
    pub(crate) fn at_path(self, p: &std::path::Path) -> Self {
        match self {
            Error::Data { path: None, line, msg } => Error::Data {
                path: Some(p.to_path_buf()),
                line,
                msg,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
