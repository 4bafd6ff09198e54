use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("step {step} out of range for a scenario with {num_steps} steps")]
    StepOutOfRange { step: usize, num_steps: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed wire data: {0}")]
    Wire(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("backward called without a recorded forward trace")]
    MissingCache,

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
