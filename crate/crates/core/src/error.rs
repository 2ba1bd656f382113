use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("integration failed to reach tolerance {tol:e} (error estimate {achieved:e})")]
    Integration { tol: f64, achieved: f64 },

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
