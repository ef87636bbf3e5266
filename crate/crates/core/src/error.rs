use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value outside an operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A run configuration failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A parameter slot picked up a NaN or infinity.
    #[error("numerical divergence at step {step} on worker {worker}")]
    Divergence { step: u64, worker: usize },

    #[error("bound check needs at least {required} trials, got {got}")]
    InsufficientTrials { required: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// Stamps the simulation step onto a divergence error raised below the
    /// simulator, which does not know the step.
    pub(crate) fn at_step(self, t: u64) -> Self {
        match self {
            Error::Divergence { worker, .. } => Error::Divergence { step: t, worker },
            other => other,
        }
    }
}
