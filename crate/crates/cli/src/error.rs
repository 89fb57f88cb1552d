use std::path::PathBuf;

use thiserror::Error;

/// Errors of the experiment runner. Library failures keep the module they came from.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("{module}: {source}")]
    Library {
        module: &'static str,
        #[source]
        source: nonlocal_acf::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),

    #[error("manifest {} not found", .0.display())]
    MissingManifest(PathBuf),

    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Tags a library error with the module that raised it.
pub trait InModule<T> {
    fn in_module(self, module: &'static str) -> Result<T>;
}

impl<T> InModule<T> for nonlocal_acf::Result<T> {
    fn in_module(self, module: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Library { module, source })
    }
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
