use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("could not place {requested} landmarks under the separation rule (placed {placed})")]
    Placement { requested: usize, placed: usize },
    #[error("image size {height}x{width} is invalid: {reason}")]
    Size { height: usize, width: usize, reason: &'static str },
    #[error("landmark {landmark_id} not visible in both views after {attempts} attempts")]
    Visibility { landmark_id: u32, attempts: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activations at stage {stage}")]
    Numeric { stage: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}; last good checkpoint at step {last_good_step}")]
    Divergence { step: usize, last_good_step: usize },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ForgeError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Placement { .. } => "placement",
            Self::Size { .. } => "size",
            Self::Visibility { .. } => "visibility",
            Self::Shape(_) => "shape",
            Self::Numeric { .. } => "numeric",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::Config(_) => "config",
            Self::Divergence { .. } => "divergence",
            Self::MissingCheckpoint(_) => "missing_checkpoint",
            Self::Checkpoint(_) => "checkpoint",
            Self::Io { .. } => "io",
            Self::Image(_) => "image",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;
