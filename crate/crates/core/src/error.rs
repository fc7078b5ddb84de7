use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse DICOM {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("DICOM {0} has no usable pixel data")]
    MissingPixelData(PathBuf),
    #[error("no DICOM found under {0}")]
    NoDicomFound(PathBuf),
    #[error("{failed} of {total} DICOM files failed to parse, above the {limit:.1}% limit")]
    TooManyFailures { failed: usize, total: usize, limit: f64 },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("window width must be positive, got {0}")]
    DegenerateWindow(f64),
    #[error("expected a {expected} image, got {actual}")]
    WrongShape { expected: String, actual: String },
    #[error("need more than {needed} distinct patients for the split, found {found}")]
    TooFewPatients { needed: usize, found: usize },
    #[error("class `{0}` has no samples")]
    EmptyClass(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image too small for the metric: {0}")]
    TooSmall(String),
    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),
    #[error("backbone weights have not been loaded")]
    WeightsNotLoaded,
    #[error("checksum mismatch for {what}: stored {stored}, computed {computed}")]
    ChecksumMismatch { what: String, stored: String, computed: String },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("generator expects a 28x28 input, got {0}x{1}")]
    WrongInputShape(usize, usize),
    #[error("discriminator scale mismatch: {0}")]
    ScaleMismatch(String),
    #[error("dataset is empty, cannot draw a batch")]
    DataExhausted,
    #[error("metric denominator is zero")]
    ZeroDenominator,
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step}: {what}")]
    NonFiniteLoss { step: u64, what: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("archive error: {0}")]
    Archive(String),
}

impl Error {
    /// Process exit status: 3 for numeric failures during a run, 2 for
    /// everything a user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::Tensor(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
