use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum DimmError {
    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("covariance error: {0}")]
    Covariance(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("block `{block}`: design matrix is rank deficient")]
    Singular { block: String },

    #[error("block `{block}`: optimizer did not converge ({trace})")]
    FitFailed { block: String, trace: String },

    #[error("stacking error: {0}")]
    Stacking(String),

    #[error("weight matrix is singular even with ridge {ridge:e}; consider integrating fewer blocks")]
    SingularWeight { ridge: f64 },

    #[error("integration error: {0}")]
    Integration(String),

    #[error("goodness-of-fit test undefined: {0}")]
    TestUndefined(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DimmError {
    /// Process exit status for the command-line tool: 2 ingestion, 3 block
    /// fitting, 4 integration, 5 configuration, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DimmError::Ingestion(_) | DimmError::Dataset(_) | DimmError::Io(_) => 2,
            DimmError::Singular { .. } | DimmError::FitFailed { .. } | DimmError::Domain(_) => 3,
            DimmError::Stacking(_)
            | DimmError::SingularWeight { .. }
            | DimmError::Integration(_)
            | DimmError::TestUndefined(_) => 4,
            DimmError::Config { .. } | DimmError::Scenario(_) | DimmError::Partition(_) => 5,
            DimmError::Covariance(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, DimmError>;
