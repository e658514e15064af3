use thiserror::Error;

use crate::trajectory::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(ValidationReport),

    #[error("trajectory {index} does not fit the token grid: {detail}")]
    OutOfGrid { index: usize, detail: String },

    #[error("local text `{0}` has no attached feature")]
    MissingFeature(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("guidance scheme `{scheme}` needs the {component} condition, which the bundle lacks")]
    MissingCondition {
        scheme: String,
        component: &'static str,
    },

    #[error("unknown {kind} `{name}` (registered: {available})")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("tracker failed for point {index}: {reason}")]
    Tracker { index: usize, reason: String },

    #[error("embedder failed: {0}")]
    Embedder(String),

    #[error("world generation failed: {0}")]
    World(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Whether the error stems from bad user input rather than a runtime
    /// failure. The CLI maps this to its exit code.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Shape(_)
            | Error::InvalidParam(_)
            | Error::InvalidTrajectory(_)
            | Error::OutOfGrid { .. }
            | Error::MissingFeature(_)
            | Error::MissingCondition { .. }
            | Error::Unknown { .. }
            | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
