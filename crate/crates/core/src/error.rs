use thiserror::Error;

/// Errors produced by the analysis pipeline.
#[derive(Debug, Error)]
pub enum MetaError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("not estimable: {0}")]
    NotEstimable(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular design matrix; collinear terms: {}", terms.join(", "))]
    SingularDesign { terms: Vec<String> },

    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("variance-covariance block for cluster '{cluster}' is not positive semidefinite (min eigenvalue {min_eigen:e})")]
    PsdViolation { cluster: String, min_eigen: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("optimizer did not converge: {msg}")]
    Convergence { msg: String, trace: Vec<String> },

    #[error("CR2 adjustment matrix is singular for cluster '{0}'")]
    Cr2Adjustment(String),

    #[error("cluster-robust inference needs at least 2 clusters, found {0}")]
    InsufficientClusters(usize),

    #[error("plot error: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, MetaError>;

impl MetaError {
    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        MetaError::Schema(msg.into())
    }
}
