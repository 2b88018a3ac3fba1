use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A shape, size or configuration value is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// An operation was called in the wrong state (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),
    /// A scalar argument lies outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// The requested average budget cannot be met by any exit distribution.
    #[error("infeasible budget {budget}: feasible range is [{min}, {max}]")]
    InfeasibleBudget { budget: f64, min: f64, max: f64 },
    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {what} at index {index}: {value}")]
    NonFinite { what: String, index: usize, value: f64 },
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}

macro_rules! precondition_err {
    ($($arg:tt)*) => { $crate::error::Error::Precondition(alloc::format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use precondition_err;
