use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid fraction {0}: must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes in feature file")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    VersionUnsupported(u32),
    #[error("truncated feature file: {0}")]
    TruncatedFile(String),
    #[error("invalid encoder descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("relevant set is empty")]
    EmptyRelevantSet,
    #[error("query sets differ between baseline and upgraded rankings")]
    QuerySetMismatch,
    #[error("length mismatch: {0} old features vs {1} new features")]
    LengthMismatch(usize, usize),
    #[error("uncertainty strategy needs at least two classes")]
    NeedsAtLeastTwoClasses,
    #[error("trajectory has no point at fraction 0")]
    MissingZeroPoint,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
