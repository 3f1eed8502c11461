use std::path::PathBuf;

/// Errors surfaced by every layer of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}` (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {}; run `{command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: String },
    #[error("malformed file {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Json(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
