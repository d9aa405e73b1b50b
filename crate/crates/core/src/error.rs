use thiserror::Error;

use crate::model::CflViolation;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("control value 0 is not admissible")]
    ZeroControl,

    #[error("index ({k}, {l}) is outside the interior stencil range")]
    StencilOutOfRange { k: usize, l: usize },

    #[error("p = {0} lies outside [0, 1]")]
    ProbabilityOutOfRange(f64),

    #[error("CFL conditions violated for h = {h}, delta = {delta}: {violations:?}")]
    Cfl {
        h: f64,
        delta: f64,
        violations: Vec<CflViolation>,
    },

    #[error("Picard iteration did not converge after {iterations} sweeps (last increment {last_increment:e})")]
    PicardDivergence {
        iterations: usize,
        last_increment: f64,
    },

    #[error("step {step} (t = {t}), control {control}: {source}")]
    Step {
        step: usize,
        t: f64,
        control: String,
        #[source]
        source: Box<Error>,
    },

    #[error("linear-driver reference requested for a non-linear driver")]
    NonLinearDriver,

    #[error("log-log fit rejected: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
