use std::path::Path;

use fewshot_core::error::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} already exists; outputs are never overwritten")]
    Exists(String),

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Autodiff(#[from] fewshot_autodiff::AutodiffError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        fn is_config(e: &CoreError) -> bool {
            match e {
                CoreError::Config { .. } => true,
                CoreError::Context { source, .. } => is_config(source),
                _ => false,
            }
        }
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if is_config(e) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
