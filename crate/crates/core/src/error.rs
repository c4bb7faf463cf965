use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Zero or negative extents, regions outside the domain, misaligned boxes.
    InvalidGeometry(String),
    /// Refinement flags that do not match the current leaf set.
    InvalidFlags { expected: usize, found: usize },
    /// An operation was called with inputs violating its precondition.
    Precondition(String),
    /// A point does not lie inside the meshed domain.
    PointOutside([f64; 3]),
    /// The linear solver could not factorize or solve the system.
    Singular(String),
    /// Newton did not reach the stopping criterion.
    NonConvergence { iterations: usize, residual: f64 },
    /// The backtracking line search found no decrease.
    LineSearch { trials: usize },
    /// The time step fell below the minimum allowed value.
    TimeStepUnderflow { time: f64, dt: f64 },
    /// A requested window or interval is not covered by the data.
    OutOfRange(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidGeometry(msg) => write!(f, "invalid geometry: {msg}"),
            Error::InvalidFlags { expected, found } => write!(
                f,
                "refinement flags cover {found} cells but the mesh has {expected} leaves"
            ),
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::PointOutside(p) => {
                write!(f, "point ({}, {}, {}) is outside the domain", p[0], p[1], p[2])
            }
            Error::Singular(msg) => write!(f, "linear solver failure: {msg}"),
            Error::NonConvergence {
                iterations,
                residual,
            } => write!(
                f,
                "Newton did not converge after {iterations} iterations (residual {residual:e})"
            ),
            Error::LineSearch { trials } => {
                write!(f, "line search found no decrease after {trials} trials")
            }
            Error::TimeStepUnderflow { time, dt } => {
                write!(f, "time step {dt:e} s fell below the minimum at t = {time:e} s")
            }
            Error::OutOfRange(msg) => write!(f, "out of range: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
