use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or input that was rejected before any work started.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown architecture `{0}` (expected one of: alexnet, vgg11, vgg13, vgg16, fe_alexnet)")]
    UnknownArchitecture(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown layer `{0}`; use --list-layers to see eligible names")]
    UnknownLayer(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("required artifact is missing: {0}")]
    MissingArtifact(String),

    #[error("training failed: {0}")]
    Train(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("stimulus error: {0}")]
    Stimulus(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for validation-type failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::UnknownArchitecture(_)
            | Error::UnknownLayer(_)
            | Error::EmptyInput(_)
            | Error::MissingArtifact(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
