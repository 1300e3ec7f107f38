use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlmmError {
    /// Input data violates a structural assumption of the model.
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("Cholesky factorization failed for cluster {cluster}: {context}")]
    ClusterNumerics { cluster: usize, context: String },

    #[error("pooled GLM design matrix is rank deficient")]
    RankDeficient,

    #[error("iteratively reweighted least squares did not converge after {0} iterations")]
    IrlsNotConverged(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("local variational parameters are stale for cluster {cluster} (relative change {change:.3e}); re-optimize locals before diagnosing")]
    StaleLocals { cluster: usize, change: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GlmmError>;
