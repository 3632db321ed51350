use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("payload size mismatch for {what}: header declares {expected} bytes, found {actual}")]
    SizeMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("duplicate case id `{0}`")]
    DuplicateCase(String),

    #[error("case `{case}`: class_id {class_id} out of range for {num_classes} classes")]
    UnknownClass {
        case: String,
        class_id: u32,
        num_classes: usize,
    },

    #[error("invalid: {0}")]
    Invalid(String),

    #[error("fingerprint requires ≥1 case")]
    EmptyFingerprint,

    #[error("anchor optimization requires objects in the training split")]
    NoTrainingObjects,

    #[error("voxel budget {0} too small to fit the minimum 4³ patch")]
    BudgetTooSmall(u64),

    #[error("box center {center:?} lies outside patch at {origin:?} of size {size:?}")]
    CenterOutsidePatch {
        center: [f64; 3],
        origin: [i64; 3],
        size: [usize; 3],
    },

    #[error("inconsistent patch grid: {0}")]
    InconsistentGrid(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed softmax: {0}")]
    MalformedSoftmax(String),

    #[error("objects cannot fit: {0}")]
    CannotFit(String),

    #[error("missing prerequisite artifact `{0}`")]
    MissingArtifact(String),
}

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_MISSING_PREREQUISITE: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => EXIT_MISSING_PREREQUISITE,
            Error::Io { .. } => EXIT_INTERNAL,
            _ => EXIT_VALIDATION,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
