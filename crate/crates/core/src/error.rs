use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vertex index {index} out of range in tet {tet} ({n_vertices} vertices)")]
    IndexOutOfRange { tet: usize, index: usize, n_vertices: usize },

    #[error("tet {tet} has non-positive signed volume {volume:e}")]
    InvertedTet { tet: usize, volume: f64 },

    #[error("mesh is not conformal: {bad_faces} offending face(s)")]
    NonConformal { bad_faces: usize },

    #[error("degenerate bounding box: extent {extent:?}")]
    DegenerateBox { extent: [f64; 3] },

    #[error("invalid resolution {0:?}: every axis needs at least one cell")]
    InvalidResolution([usize; 3]),

    #[error("degenerate primitive: weight sum {0:e} is not positive")]
    DegenerateWeights(f64),

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvertedTet { .. } => "inverted_tet",
            Error::NonConformal { .. } => "non_conformal",
            Error::DegenerateBox { .. } => "degenerate_box",
            Error::InvalidResolution(_) => "invalid_resolution",
            Error::DegenerateWeights(_) => "degenerate_weights",
            Error::NotSymmetric(_) => "not_symmetric",
            Error::SizeMismatch(_) => "size_mismatch",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
