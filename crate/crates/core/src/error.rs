use std::path::PathBuf;

use spacetoken_diff::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] DiffError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("encoding: {0}")]
    Encoding(String),
    #[error("tokens: {0}")]
    Tokens(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("dataset record {record}: {msg}")]
    Dataset { record: usize, msg: String },
    #[error("dataset: {0}")]
    DatasetFormat(String),
    #[error("model: {0}")]
    Model(String),
    #[error("training: {0}")]
    Training(String),
    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged { step: usize, last_good: Option<PathBuf> },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
