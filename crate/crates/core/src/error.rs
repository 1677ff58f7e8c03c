use thiserror::Error;

/// Error categories surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph, model, or method was assembled inconsistently.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data could not be ingested or referenced.
    #[error("data error: {0}")]
    Data(String),
    /// Training produced non-finite values or otherwise failed mid-run.
    #[error("training fault: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable category label, used for CLI exit codes and logs.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
