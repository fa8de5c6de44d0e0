use std::path::{Path, PathBuf};

use mlh_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config not found: {}", .0.display())]
    ConfigNotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: CoreError },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, source: impl Into<CoreError>) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            source: source.into(),
        }
    }

    /// Stable identifier printed as `error[code]`.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ConfigNotFound(_) => "config-not-found",
            CliError::Io { .. } => "io",
            CliError::Input { source, .. } | CliError::Core(source) => core_code(source),
            CliError::Usage(_) => "usage",
            CliError::Grid(_) => "grid",
            CliError::Manifest(_) => "manifest",
        }
    }

    /// `error[code]: message` on one line.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.code())
    }
}

fn core_code(e: &CoreError) -> &'static str {
    match e {
        CoreError::Codebook(_) => "codebook",
        CoreError::Data(_) => "data",
        CoreError::Diff(_) => "diff",
        CoreError::Format(_) => "format",
        CoreError::Loss(_) => "loss",
        CoreError::Model(_) => "model",
        CoreError::Retrieval(_) => "retrieval",
        CoreError::Train(_) => "train",
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_core!(
    mlh_core::codebook::CodebookError,
    mlh_core::dataio::DataError,
    mlh_core::format::FormatError,
    mlh_core::moh::ModelError,
    mlh_core::retrieval::RetrievalError,
    mlh_core::trainer::TrainError
);
