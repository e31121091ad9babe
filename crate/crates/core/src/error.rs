use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("insufficient views: need {needed} candidates, have {available}")]
    InsufficientViews { needed: usize, available: usize },

    #[error("insufficient features: no sparse point observed by view {view} lies in front of it")]
    InsufficientFeatures { view: u32 },

    #[error("invalid disparity range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty set passed to set aggregation")]
    EmptySet,

    #[error("loss has no valid pixels")]
    EmptyLoss,

    #[error("metric has no valid pixels")]
    EmptyMetric,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("failed to load frame {frame}: {reason}")]
    Load { frame: String, reason: String },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite value at step {step} in layer {layer}")]
    NonFinite { step: usize, layer: String },

    #[error("volume needs {needed} bytes, budget is {budget} bytes")]
    MemoryBudget { needed: u64, budget: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::DegenerateConfiguration(_) | Error::BehindCamera { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
