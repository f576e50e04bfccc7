use thiserror::Error;

/// Errors raised by the solvers and integrators.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// An integrator stage produced NaN or an infinity.
    #[error("non-finite state near node {node} (t = {t})")]
    NonFiniteState { node: usize, t: f64 },

    #[error("control value {value:?} on interval {interval} is not one of the atoms")]
    ValueNotAnAtom { interval: usize, value: Vec<f64> },

    #[error("terminal cost does not provide a Hessian")]
    MissingHessian,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
