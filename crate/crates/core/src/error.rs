use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite position ({}, {}, {})", .0[0], .0[1], .0[2])]
    NonFinite([f64; 3]),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("label {0} is not present")]
    MissingLabel(u8),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("nifti: {0}")]
    Nifti(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
