use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("symbol {0:?} is not in the alphabet")]
    Symbol(char),
    #[error("unknown token id {0}")]
    TokenId(u32),
    #[error("model config error: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    MissingArtifact,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::MissingArtifact
            }
            Error::Parameter(_) | Error::Config(_) => ErrorClass::Config,
            Error::NonFinite(_) | Error::Numerical(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
