use std::path::Path;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vsd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("media error: {0}")]
    Media(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn media(path: &Path, e: impl std::fmt::Display) -> Self {
        Error::Media(format!("{}: {e}", path.display()))
    }
}
