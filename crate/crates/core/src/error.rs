use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed mesh file {path}: {reason}")]
    MalformedMesh { path: PathBuf, reason: String },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("expected {expected} parts, found {found}")]
    PartCountMismatch { expected: usize, found: usize },
    #[error("unknown part id {part} (mesh has {parts} parts)")]
    UnknownPart { part: usize, parts: usize },
    #[error("unknown object label `{0}`")]
    UnknownLabel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
