use alloc::string::String;
use core::fmt;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A dimension is zero or a data buffer has the wrong length.
    InvalidShape {
        rows: usize,
        cols: usize,
        len: usize,
    },
    /// A matrix entry is NaN or infinite.
    NonFinite,
    /// Operand shapes do not compose.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    NotSquare {
        rows: usize,
        cols: usize,
    },
    NotSymmetric {
        max_asymmetry: f64,
    },
    /// A Cholesky pivot was not strictly positive.
    NotPositiveDefinite {
        pivot: usize,
    },
    /// Jacobi sweeps exhausted before the off-diagonal mass vanished.
    ConvergenceFailure {
        sweeps: usize,
    },
    /// Every singular value is zero.
    AllSingular,
    RatioOutOfRange(f64),
    InvalidRank {
        rank: usize,
        max: usize,
    },
    /// The Gram matrix has no singular value above the pseudo-inverse threshold.
    DegenerateGram,
    GramNotInvertible,
    MissingGram(String),
    DuplicateSite(String),
    /// The ratio clamps cannot hold the group budget.
    InfeasibleBudget {
        group: String,
        target: f64,
    },
    InvalidParameter(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { rows, cols, len } => {
                write!(f, "invalid shape {rows}x{cols} for buffer of length {len}")
            }
            Error::NonFinite => f.write_str("matrix contains a non-finite entry"),
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => {
                write!(
                    f,
                    "dimension mismatch in {context}: expected {expected}, found {found}"
                )
            }
            Error::NotSquare { rows, cols } => write!(f, "matrix is not square ({rows}x{cols})"),
            Error::NotSymmetric { max_asymmetry } => {
                write!(
                    f,
                    "matrix is not symmetric (relative asymmetry {max_asymmetry:e})"
                )
            }
            Error::NotPositiveDefinite { pivot } => {
                write!(f, "matrix is not positive definite (pivot {pivot})")
            }
            Error::ConvergenceFailure { sweeps } => {
                write!(f, "SVD did not converge after {sweeps} sweeps")
            }
            Error::AllSingular => f.write_str("all singular values are zero"),
            Error::RatioOutOfRange(r) => write!(f, "compression ratio {r} outside [0, 1)"),
            Error::InvalidRank { rank, max } => write!(f, "rank {rank} exceeds maximum {max}"),
            Error::DegenerateGram => f.write_str("gram matrix has no significant singular value"),
            Error::GramNotInvertible => f.write_str("gram matrix is not invertible"),
            Error::MissingGram(site) => write!(f, "no gram matrix for site {site}"),
            Error::DuplicateSite(site) => write!(f, "duplicate site id {site}"),
            Error::InfeasibleBudget { group, target } => {
                write!(
                    f,
                    "group {group} cannot meet target ratio {target} within the ratio clamps"
                )
            }
            Error::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
