use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Matrix or weight shapes do not agree.
    ShapeMismatch(String),
    /// An argument violates an operation's preconditions.
    InvalidArgument(String),
    /// A fusion or parallel plan does not fit the model it is applied to.
    InvalidPlan(String),
    /// Folded-scale fusion hit a zero channel in the target scale.
    DegenerateScale(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidPlan(msg) => write!(f, "invalid plan: {msg}"),
            Error::DegenerateScale(msg) => write!(f, "degenerate scale: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
