use std::path::PathBuf;

use crate::optimizer::StepRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("inversion rejected: {0}")]
    InversionRejected(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("fake pool of size {size} must be strictly larger than the real set ({reals})")]
    PoolTooSmall { size: usize, reals: usize },

    #[error("fake pool is empty")]
    EmptyPool,

    #[error("{skipped} of {total} items skipped, above the configured limit of {limit}")]
    SkipLimitExceeded {
        skipped: usize,
        total: usize,
        limit: f64,
    },

    #[error("feature shape mismatch: {0}")]
    FeatureShapeMismatch(String),

    #[error("optimization diverged at step {step}")]
    Divergence {
        step: usize,
        trajectory: Vec<StepRecord>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("ablation needs at least two margins, got {0}")]
    InsufficientMargins(usize),

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("stage `{stage}` cannot start: {reason}")]
    Dependency { stage: String, reason: String },

    #[error("stale artifact {path}: recorded fingerprint {expected}, found {found}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("run interrupted after {completed} items")]
    Interrupted { completed: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
