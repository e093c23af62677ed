use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("interpolating regime: q = {q:e} diverged")]
    Interpolating { q: f64 },
    #[error("unphysical state: {0}")]
    Unphysical(String),
    #[error("iteration diverged: residual {0:e}")]
    Diverged(f64),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
