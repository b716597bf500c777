use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    /// All weighted residuals vanish, so a variance update would be zero.
    #[error("degenerate exact fit: weighted residual mass is zero")]
    DegenerateFit,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {message}")]
    Parse { path: String, row: usize, message: String },

    #[error("fit document: {0}")]
    Document(String),
}
