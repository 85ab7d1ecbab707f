use std::path::PathBuf;

use thiserror::Error;

use crate::classifier::ClassifierError;
use crate::dataset::DatasetError;
use crate::registry::RegistryError;
use crate::service::ServiceError;
use crate::sim::SimError;
use crate::tally::TallyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error. Each module has its own error enum; this wraps them
/// together with I/O and parse failures so callers can use `?` across stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Tally(#[from] TallyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }
}
