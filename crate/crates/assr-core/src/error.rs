//! Crate-wide error type.

use crate::stage::StageLabel;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the pipeline, from malformed EDF bytes
/// to dimension mismatches between models and feature vectors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- EDF / hypnogram / manifest ----
    #[error("EDF version field is {found:?}, expected \"0\" padded with spaces")]
    VersionMismatch { found: String },
    #[error("EDF truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed EDF field {field}: {value:?}")]
    MalformedField { field: &'static str, value: String },
    #[error("EDF field {field} value {value:?} does not fit in {width} bytes")]
    FieldTooLong {
        field: &'static str,
        value: String,
        width: usize,
    },
    #[error("channel {0:?} not found in recording")]
    ChannelNotFound(String),
    #[error("recording {0:?} contains no samples")]
    EmptyRecording(String),
    #[error("unknown hypnogram code {code:?} on line {line}")]
    UnknownCode { code: String, line: usize },
    #[error("hypnogram contains no epochs")]
    EmptyHypnogram,
    #[error("duplicate patient id {0:?} in manifest")]
    DuplicatePatient(String),
    #[error("split requests {needed} patients but the manifest has {available}")]
    InsufficientPatients { needed: usize, available: usize },
    #[error("manifest split is not disjoint: {0:?} is in both train and test")]
    OverlappingSplit(String),
    #[error("no (signal, hypnogram) pairs found under {0}")]
    EmptyDataDir(String),

    // ---- preprocessing ----
    #[error("invalid filter frequency: {0}")]
    InvalidFrequency(String),
    #[error("invalid band [{low}, {high}] at sample rate {fs}")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("signal is empty")]
    EmptySignal,
    #[error("stage {0:?} cannot be merged into the five-class space")]
    ExcludedLabel(StageLabel),
    #[error("label {0:?} is outside the merged five-class space")]
    UnmergedLabel(StageLabel),
    #[error("no epochs left after {0}")]
    NoEpochs(&'static str),

    // ---- features / DBN ----
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("layer too large to enumerate: {visible}+{hidden} units > {max}")]
    LayerTooLarge {
        visible: usize,
        hidden: usize,
        max: usize,
    },
    #[error("empty training data")]
    EmptyData,
    #[error("no architecture candidates supplied")]
    EmptyCandidates,
    #[error("invalid architecture {0:?}: {1}")]
    InvalidArchitecture(String, &'static str),

    // ---- classifiers ----
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { pivot: f64, row: usize },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("stage {0:?} is absent from the training labels")]
    MissingState(StageLabel),
    #[error("empty observation sequence")]
    EmptySequence,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // ---- pipeline / bundles / reports ----
    #[error("expected {expected} values, got {actual}")]
    WrongCount { expected: usize, actual: usize },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("bundle schema version {found} unsupported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("bundle is missing {0}")]
    MissingBundleFile(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    // The cause is part of the message rather than a `source` link, so
    // chain-printing wrappers (anyhow's `{:#}`) don't repeat it.
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
