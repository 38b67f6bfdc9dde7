use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("log of non-positive entry {value} at index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was recorded without gradients")]
    GradDisabled,

    #[error("objective is non-deterministic: baseline evaluations {first} and {second} differ")]
    NonDeterministic { first: f64, second: f64 },

    #[error("key for token {token} has norm {norm}, expected unit norm")]
    KeyNorm { token: usize, norm: f64 },

    #[error("zero-norm key row at token {token}, head {head}")]
    ZeroNormKey { token: usize, head: usize },

    #[error("sequence length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },

    #[error("duplicate coordinate ({row}, {col}) at patches {first} and {second}")]
    DuplicateCoord { row: u32, col: u32, first: usize, second: usize },

    #[error("coordinate ({row}, {col}) of patch {index} is outside a {height}x{width} grid")]
    CoordOutOfGrid { index: usize, row: u32, col: u32, height: usize, width: usize },

    #[error("kernel extent must be odd, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },

    #[error("empty bag")]
    EmptyBag,

    #[error("empty block stack")]
    EmptyStack,

    #[error("class {class} out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Manifest(String),

    #[error("{0}")]
    Config(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged (non-finite loss) on bag {bag}")]
    Divergence { bag: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("no attention available: the {0} aggregator does not produce attention weights")]
    NoAttention(&'static str),

    #[error("k = {k} out of range for a bag of {n} patches")]
    KOutOfRange { k: usize, n: usize },

    #[error("empty patch subset")]
    EmptySubset,

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category used as the prefix of CLI failure messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Invalid(_) => "config",
            Error::Io { .. } | Error::MissingCheckpoint(_) => "io",
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::VersionMismatch { .. }
            | Error::Corrupt(_) => "format",
            Error::Manifest(_) => "manifest",
            Error::NonFiniteGradient(_) | Error::Divergence { .. } => "training",
            Error::UndefinedMetric(_) | Error::EmptyInput(_) => "metric",
            _ => "compute",
        }
    }
}
