use std::net::IpAddr;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A capture record that could not be decoded. `location` is a 1-based
    /// line number for JSONL and a byte offset for PCAP.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("unsupported capture format: {0}")]
    Format(String),

    #[error("direction ambiguous for {src} -> {dst}: exactly one endpoint must be local")]
    DirectionAmbiguous { src: IpAddr, dst: IpAddr },

    #[error("shape mismatch: expected {expected} features, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("class {0:?} is absent from the training labels")]
    MissingClass(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("no predictions to score")]
    EmptyReport,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
