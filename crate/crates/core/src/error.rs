use std::path::PathBuf;

use crate::prompt_bank::Finding;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Variants are grouped by the module
/// that raises them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },

    // EMB1 binary format
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("unsupported dtype {dtype} at offset {offset}")]
    DtypeMismatch { offset: u64, dtype: u32 },
    #[error("header truncated at offset {offset}")]
    TruncatedHeader { offset: u64 },
    #[error("payload truncated at offset {offset}: expected {expected} payload bytes")]
    TruncatedPayload { offset: u64, expected: u64 },
    #[error("malformed header at offset {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: &'static str },
    #[error("unexpected trailing data at offset {offset}")]
    TrailingData { offset: u64 },

    // matrices
    #[error("matrix data length {len} does not equal {rows} x {cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix must have at least one column")]
    ZeroColumns,
    #[error("row {0} has (near) zero norm")]
    ZeroNormRow(usize),
    #[error("row {0} contains a non-finite value")]
    NonFiniteRow(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    // manifests
    #[error("manifest schema error: {0}")]
    ManifestSchema(String),
    #[error("shape {shape_id}: view row {row} out of range for {rows} rows")]
    IndexOutOfRange { shape_id: String, row: usize, rows: usize },
    #[error("shape {shape_id}: unknown label {label:?}")]
    UnknownLabel { shape_id: String, label: String },
    #[error("duplicate class {0:?}")]
    DuplicateClass(String),
    #[error("duplicate shape id {0:?}")]
    DuplicateShapeId(String),
    #[error("shape {shape_id}: view row {row} listed twice")]
    DuplicateViewRow { shape_id: String, row: usize },
    #[error("shape {0}: no views")]
    EmptyViewList(String),

    // scoring / configuration
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // prompt bank
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("candidate set of size {0} is too small (need at least 2)")]
    CandidateSetTooSmall(usize),
    #[error("class {0:?} appears twice in a candidate set")]
    DuplicateCandidate(String),
    #[error("no layer-2 prompt entry for candidate key {0:?}")]
    MissingPromptEntry(String),
    #[error("bank schema error: {0}")]
    BankSchema(String),
    #[error("bank failed validation with {} finding(s)", .0.len())]
    InvalidBank(Vec<Finding>),

    // classifier
    #[error("layer-2 entry classes {found:?} do not match candidates {expected:?}")]
    CandidateMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("dataset classes do not match prompt bank classes")]
    ClassMismatch,

    // harness
    #[error("shape {0} has no label")]
    MissingLabel(String),
    #[error("dataset has no shapes")]
    EmptyDataset,
    #[error("invalid sweep value {value} for {parameter}: {reason}")]
    InvalidSweepValue {
        parameter: String,
        value: f64,
        reason: String,
    },
    #[error("embedding dimension {dim} cannot hold the {required} planted directions")]
    DimTooSmall { dim: usize, required: usize },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: Some(path.into()),
            source,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { path: None, source }
    }
}
