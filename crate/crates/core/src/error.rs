use std::io;

use thiserror::Error;

/// Every failure the toolkit reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid streamline: {0}")]
    InvalidStreamline(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tractogram is empty")]
    EmptyTractogram,
    #[error("coordinate frame mismatch: tractogram is `{tractogram}`, plane is `{plane}`")]
    SpaceMismatch { tractogram: String, plane: String },
    #[error("streamline {index} has no label")]
    MissingLabel { index: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("index {index} out of range for {len} streamlines")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite input value")]
    NonFiniteInput,

    #[error("not a trk file")]
    NotATrkFile,
    #[error("unsupported trk file: {0}")]
    UnsupportedTrk(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("vox_to_ras transform is not invertible")]
    BadTransform,
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
