//! Random-walk approximation of forward-backward SDEs.
//!
//! The state process follows `dX = b(t,X) dt + sigma(t,X) dB` and the backward
//! pair `(Y, Z)` solves `Y_s = g(X_T) + int f(r,X,Y,Z) dr - int Z dB`. This
//! crate replaces the Brownian motion by a scaled Rademacher walk with step
//! `sqrt(h)`, `h = T/n`, and provides:
//!
//! * [`problems`]: benchmark problem definitions with closed-form or
//!   PDE-numeric reference solutions,
//! * [`walk`]: the scaled walk, the discretized forward recursion, and the
//!   discretized Malliavin calculus (sign-flip operators, variational walk,
//!   discrete Malliavin weight),
//! * [`solver`]: the backward finite difference equation for `u^n` on a
//!   non-recombining path tree or a spatial grid, plus a brute-force oracle,
//! * [`skorohod`]: coupling of the walk to a Brownian path via interval exit
//!   times, so both solutions live on one probability space,
//! * [`continuum`]: fine-grid Euler reference quantities (variational process,
//!   Malliavin weight, weight-based Z estimator, Crank-Nicolson PDE solver),
//! * [`harness`]: end-to-end L2 convergence experiments with log-log slope
//!   fits and machine-readable reports.
//!
//! All randomness is counter-based ([`rng`]): a draw is a pure function of
//! `(seed, stream, index)`, so results are reproducible at any thread count.

pub mod continuum;
mod interp;
pub mod harness;
pub mod problems;
pub mod rng;
pub mod skorohod;
pub mod solver;
pub mod stats;
pub mod walk;

use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps [`ErrorKind`] to process exit codes, so every variant carries
/// an explicit kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown problem '{name}'; registered problems: {known}")]
    UnknownProblem { name: String, known: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no reference solution available for problem '{0}'")]
    NoReference(String),
    #[error("missing derivative callback: {0}")]
    Capability(String),
    #[error("ellipticity violated: sigma({t}, {x}) = {sigma} below delta = {delta}")]
    Ellipticity { t: f64, x: f64, sigma: f64, delta: f64 },
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("fixed point did not converge: {0}")]
    Convergence(String),
    #[error("state not found in solution backend: {0}")]
    StateLookup(String),
    #[error("rare event: {0}")]
    RareEvent(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("acceptance band violated: {0}")]
    RateBand(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Capacity,
    RateBand,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnknownProblem { .. }
            | Error::Config(_)
            | Error::Validation(_)
            | Error::NoReference(_)
            | Error::Capability(_) => ErrorKind::Config,
            Error::Capacity(_) => ErrorKind::Capacity,
            Error::RateBand(_) => ErrorKind::RateBand,
            _ => ErrorKind::Other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
