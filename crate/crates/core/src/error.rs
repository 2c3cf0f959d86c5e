use std::path::PathBuf;

use crate::data::Modality;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("scan {scan_id}: missing modality directory {modality} ({path})")]
    MissingModality {
        scan_id: String,
        modality: Modality,
        path: PathBuf,
    },

    #[error("corrupt slice {path}: {reason}")]
    CorruptSlice { path: PathBuf, reason: String },

    #[error("scan {scan_id} {modality}: manifest declares {expected} slices, found {found}")]
    ManifestMismatch {
        scan_id: String,
        modality: Modality,
        expected: usize,
        found: usize,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("volume {modality} has no slices left after filtering")]
    EmptyVolume { modality: Modality },

    #[error("degenerate crop region {height}x{width}")]
    DegenerateRegion { height: usize, width: usize },

    #[error("volume {modality} has {length} slices, exceeding padded length {max}")]
    VolumeTooLong {
        modality: Modality,
        length: usize,
        max: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("true length {length} outside 1..={max}")]
    InvalidLength { length: usize, max: usize },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("class {class} has {count} members, fewer than k = {k}")]
    InsufficientClass { class: u8, count: usize, k: usize },

    #[error("empty fold: {0}")]
    EmptyFold(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
