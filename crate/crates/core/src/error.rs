use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("divergent regime: {0}")]
    Divergence(String),

    #[error("capability limit: {0}")]
    Capability(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid number field: {0}")]
    InvalidField(String),

    #[error("root finder did not converge after {sweeps} sweeps (max residual {max_residual:e})")]
    NonConvergence { sweeps: usize, max_residual: f64 },

    #[error("no admissible conductor up to {0}")]
    NoAdmissibleConductor(u64),
}

pub type Result<T> = std::result::Result<T, Error>;
