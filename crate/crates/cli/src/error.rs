use std::path::{Path, PathBuf};

use heartbert_core::error::ErrorClass;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] heartbert_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Core(heartbert_core::Error::io(path, source))
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Missing(_)) | CliError::Missing(_) => 3,
            CliError::Config(_) => 2,
            CliError::Data(_) => 4,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::MissingArtifact => 3,
                ErrorClass::Data => 4,
                ErrorClass::Numerical => 5,
            },
        }
    }
}
