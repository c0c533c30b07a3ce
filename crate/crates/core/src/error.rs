use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model variance is zero at t = {t}; use t > 0 or a positive base bandwidth")]
    Singularity { t: f64 },

    #[error("sample diverged at reverse step {step}")]
    Diverged { step: usize },

    #[error("feature map must be fitted before use")]
    NotFitted,

    #[error("classifier has not been trained")]
    NotTrained,

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("rank {rank} exceeds min(fan_in, fan_out) = {max}")]
    InvalidRank { rank: usize, max: usize },

    #[error("no cluster survives cohesion threshold {tau}")]
    NoSurvivingCluster { tau: f64 },

    #[error("similarity undefined for zero vectors in cosine mode")]
    UndefinedSimilarity,

    #[error("no conditional model for condition {0}")]
    MissingCondition(usize),

    #[error("model does not expose a tractable density: {0}")]
    UnsupportedModel(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
