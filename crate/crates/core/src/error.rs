use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum XmicError {
    #[error("vector norm {norm:e} is at or below the normalization guard")]
    ZeroNorm { norm: f64 },
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabularies belong to different tasks ({0} vs {1})")]
    TaskMismatch(String, String),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("class name is empty")]
    EmptyClassName,
    #[error("clip {0} has no label for the requested task")]
    MissingLabel(String),
    #[error("label {label:?} of clip {clip} is not in the vocabulary")]
    UnknownLabel { clip: String, label: String },
    #[error("incompatible composition: {0}")]
    IncompatibleComposition(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("negative input {0}")]
    NegativeInput(f64),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("unknown ablation kind {0:?}")]
    UnknownKind(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl XmicError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XmicError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, XmicError>;
