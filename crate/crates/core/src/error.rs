use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numerical core.
///
/// Shape and mode violations are hard errors by design: there is no implicit
/// broadcasting anywhere in this crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shape or dimension contract violated.
    Shape(String),
    /// NaN or infinity where finite values are required.
    NonFinite(String),
    /// Numerical failure: no convergence, indefinite matrix, ...
    Numeric(String),
    /// Invalid argument, label, or configuration value.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Numeric(msg) => write!(f, "numerical error: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

#[macro_export]
macro_rules! invalid_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(alloc::format!($($arg)*))
    };
}
