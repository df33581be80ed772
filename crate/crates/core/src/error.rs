use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed skeleton file at line {line}: {reason}")]
    MalformedFile { line: usize, reason: String },

    #[error("invalid resample target: {0}")]
    InvalidTarget(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("joint {joint} lies behind the camera (z = {z})")]
    BehindCamera { joint: usize, z: f64 },

    #[error("projected skeleton has an empty bounding box and zero margins")]
    EmptyBox,

    #[error("bad edge: {0}")]
    BadEdge(String),

    #[error("cannot L2-normalize a zero vector")]
    ZeroVector,

    #[error("dataset is empty")]
    DataEmpty,

    #[error("non-finite loss at stage {stage}, epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("unknown variant: {0}")]
    UnknownVariant(String),

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("checkpoint stage {found} is below the required stage {required}")]
    StageMismatch { found: u8, required: u8 },

    #[error("sample not found: {0}")]
    SampleNotFound(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
