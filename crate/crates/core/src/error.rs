//! Error type shared by all toolkit modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RomError>;

#[derive(Debug, Error)]
pub enum RomError {
    /// A time integration produced a non-finite state.
    #[error("state diverged (non-finite) at step {step} (t = {time})")]
    Divergence { step: usize, time: f64 },

    /// Newton iteration inside an implicit step failed to reach tolerance.
    #[error("Newton iteration failed at step {step} (t = {time}), residual {residual:e} after {iters} iterations")]
    NewtonFailure {
        step: usize,
        time: f64,
        residual: f64,
        iters: usize,
    },

    /// Requested more POD modes than the snapshot data support.
    #[error("requested {requested} modes but the snapshot matrix has numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    /// Operands defined on different grids / weight vectors.
    #[error("incompatible discretization: {0}")]
    IncompatibleDiscretization(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A covariance or factorization lost positive semidefiniteness
    /// beyond the documented tolerance.
    #[error("numerical conditioning failure: {0}")]
    NumericalConditioning(String),

    /// Too many ensemble members diverged for the forecast to be usable.
    #[error("{diverged} of {total} ensemble members diverged (> {percent}% limit); the prior is likely too wide")]
    EnsembleDegenerate {
        diverged: usize,
        total: usize,
        percent: u8,
    },

    /// Evidence maximization produced a non-finite value.
    #[error("sparse regression iteration failed: {0}")]
    IterationFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

impl RomError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        RomError::Io {
            path: path.into(),
            source,
        }
    }
}
