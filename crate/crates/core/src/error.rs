//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("step size underflow at t = {t}: the problem appears too stiff")]
    Stiffness { t: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    #[error("no steady state: gamma_minus vanishes")]
    NoSteadyState,

    #[error("singular envelope: denominator vanishes at t = {t}")]
    SingularEnvelope { t: f64 },

    #[error("undefined observable: {0}")]
    UndefinedObservable(String),

    #[error("beyond exceptional point: |gamma| = {gamma} exceeds 2J = {two_j}")]
    BeyondExceptionalPoint { gamma: f64, two_j: f64 },

    #[error("no stable optimum: all starting points led to unstable trajectories")]
    NoStableOptimum,
}

pub type Result<T> = std::result::Result<T, Error>;
