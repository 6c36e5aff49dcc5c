use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or inconsistent input data.
    #[error("{0}")]
    Data(String),
    /// A documented invariant or precondition does not hold.
    #[error("{0}")]
    Invariant(String),
    /// NaN/inf during training or evaluation.
    #[error("{0}")]
    Numerical(String),
    /// Invalid configuration value.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Autograd(#[from] autograd::AutogradError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Data(_) => "data",
            Error::Invariant(_) => "invariant",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::Autograd(autograd::AutogradError::NonFinite { .. })
            | Error::Autograd(autograd::AutogradError::NonFiniteGradient { .. }) => "numerical",
            Error::Autograd(_) => "invariant",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
