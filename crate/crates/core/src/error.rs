use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cholesky factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("levinson recursion broke down at order {order} (pivot {pivot:e})")]
    ToeplitzBreakdown { order: usize, pivot: f64 },

    #[error("matrix is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure at iteration {iteration}: {source}")]
    Sweep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Shape(_) | Error::Parse { .. } => 3,
            Error::InvalidInput(_) => 2,
            Error::Factorization { .. }
            | Error::ToeplitzBreakdown { .. }
            | Error::RankDeficient { .. }
            | Error::Numerical(_) => 4,
            Error::Sweep { source, .. } => source.exit_code(),
        }
    }
}
