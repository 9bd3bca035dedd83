use thiserror::Error;

/// Errors raised by the numerical routines and the simulation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("density evaluated to a non-finite value at x = {x}")]
    NonFiniteDensity { x: f64 },

    #[error("quadrature failed to converge on [{a}, {b}]")]
    QuadratureFailed { a: f64, b: f64 },

    #[error("invalid density specification: {0}")]
    InvalidDensity(String),

    #[error("gamma integral diverges near zero local time ({0})")]
    GammaDivergence(String),

    #[error("ODE step size underflow at s = {s}")]
    OdeStall { s: f64 },

    #[error("payoff atom at local time {level} lies beyond the embedding domain {l_max}")]
    DomainExceeded { level: f64, l_max: f64 },

    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),

    #[error("psi2 is not increasing: delta density is nonpositive at x = {x}")]
    NonIncreasingPsi2 { x: f64 },

    #[error("delta tail vanishes at x = {x}")]
    DeltaTailVanishes { x: f64 },

    #[error("two-marginal construction rejected: {0}")]
    DegeneratePair(String),

    #[error("embedding map ordering violated: {0}")]
    OrderingViolation(String),

    #[error("generator is undefined at x = 0")]
    ZeroSpot,

    #[error("empirical sample is empty")]
    EmptySample,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("root bracket [{lo}, {hi}] does not contain a sign change")]
    NoBracket { lo: f64, hi: f64 },

    #[error("malformed embedding CSV: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
