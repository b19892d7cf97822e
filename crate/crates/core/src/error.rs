use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path:?}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset load error for frame {frame_index}: {message}")]
    DatasetLoad { frame_index: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("scene generation consistency error: {0}")]
    SceneGeneration(String),

    #[error("numerical failure during {phase}: {message}")]
    Numerical { phase: String, message: String },

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
