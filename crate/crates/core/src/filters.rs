//! First-order command filters `τ ẋ_c + x_c = x_d`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("filter time constant must be positive, got {0}")]
    NonPositiveTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandFilter {
    tau: f64,
    /// Filter output `x_c`.
    pub state: f64,
}

impl CommandFilter {
    pub fn new(tau: f64, state: f64) -> Result<Self, FilterError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(FilterError::NonPositiveTau(tau));
        }
        Ok(Self { tau, state })
    }

    /// Starts the filter on its command so the filtering error is zero at t = 0.
    pub fn init(tau: f64, x_d0: f64) -> Result<Self, FilterError> {
        Self::new(tau, x_d0)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `ẋ_c = (x_d - x_c) / τ`.
    pub fn derivative(&self, x_d: f64) -> f64 {
        filter_rate(self.tau, self.state, x_d)
    }

    /// Derivative estimate of the command signal used by the backstepping
    /// recursion. Identical to [`CommandFilter::derivative`]; the filter's own
    /// ODE supplies `ẋ_c` exactly.
    pub fn derivative_estimate(&self, x_d: f64) -> f64 {
        self.derivative(x_d)
    }

    /// Filtering error `x_e = x_c - x_d`.
    pub fn error(&self, x_d: f64) -> f64 {
        self.state - x_d
    }
}

#[inline]
pub fn filter_rate(tau: f64, x_c: f64, x_d: f64) -> f64 {
    (x_d - x_c) / tau
}
