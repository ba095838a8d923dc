use thiserror::Error;

use crate::data::DataError;
use crate::teacher::TeacherError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (first utterance {id})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        id: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
