use thiserror::Error;

/// Errors raised by the detector model, simulator and calibration routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("stirling number S({m}, k) exceeds the configured bound m <= {bound}")]
    BoundExceeded { m: usize, bound: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "compensated sum unstable: estimated error {estimated_error:.3e} vs result {value:.3e}"
    )]
    NumericalInstability { value: f64, estimated_error: f64 },

    #[error("degenerate scan point: {clicks} clicks in {trials} trials")]
    DegeneratePoint { clicks: u64, trials: u64 },

    #[error("too few scan points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("fit did not converge after {iterations} iterations (last eta = {eta}, mean = {mean}, dark = {dark}, chi2 = {chi2})")]
    NonConvergence {
        iterations: usize,
        eta: f64,
        mean: f64,
        dark: f64,
        chi2: f64,
    },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Checks that `value` is a probability in `[0, 1]`.
pub(crate) fn check_probability(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(name, format!("{value} is not in [0, 1]")))
    }
}
