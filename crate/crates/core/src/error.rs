use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; shapes are `(rows, cols)`.
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A vector norm fell below the normalization guard.
    DegenerateNorm,
    /// An argument is outside its valid range.
    Parameter(String),
    /// Inconsistent or infeasible configuration.
    Config(String),
    /// Input data is missing or malformed.
    Data(String),
    /// A ranking instance or query has no relevant item.
    NoPositives,
    /// A loss or gradient became NaN or infinite.
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::DegenerateNorm => f.write_str("vector norm is below the normalization guard"),
            Error::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::NoPositives => f.write_str("no relevant items"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
