use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mcvc_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("config schema violation at {}", keys.join(", "))]
    Schema { keys: Vec<String> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing artifact for case {case}: {path}")]
    MissingArtifact { case: String, path: PathBuf },
    #[error("http backend {kind}: {message}")]
    Http { kind: String, message: String },
    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(origin: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            origin: origin.into(),
            message: message.to_string(),
        }
    }

    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Schema { .. } | Error::Usage(_) => 1,
            Error::Core(e) if is_validation(e) => 1,
            _ => 2,
        }
    }
}

fn is_validation(e: &mcvc_core::Error) -> bool {
    use mcvc_core::Error as E;
    matches!(e, E::Dimension(_) | E::TooManyConcepts { .. } | E::EmptyDataset(_))
}
