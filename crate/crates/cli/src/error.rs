use std::path::PathBuf;

use hookmem_core::dataset::DatasetError;
use hookmem_core::eval::EvalError;
use hookmem_core::network::NetworkError;
use hookmem_core::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot corrupt: {0}")]
    SnapshotCorrupt(String),
    #[error("malformed data in {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } | CliError::SnapshotCorrupt(_) | CliError::Malformed { .. } => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Dataset errors carry no path of their own; `path` is the file involved.
pub fn dataset_error(path: impl Into<PathBuf>, e: DatasetError) -> CliError {
    let path = path.into();
    match e {
        DatasetError::Io(source) => CliError::Io { path, source },
        DatasetError::Json(err) => CliError::Malformed {
            path,
            message: err.to_string(),
        },
        other => CliError::Config(other.to_string()),
    }
}
