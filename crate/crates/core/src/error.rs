use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested op.
    Shape { op: &'static str, detail: String },
    /// An index (target class, row, item) is out of range.
    Index { what: &'static str, index: usize, bound: usize },
    /// Input is numerically degenerate (e.g. a zero-norm vector for cosine).
    Degenerate(&'static str),
    /// API misuse such as calling backward on a non-scalar.
    Contract(String),
    /// A NaN or infinite value showed up where finite values are required.
    NonFinite(String),
    /// Invalid configuration values.
    Config(String),
    /// Sequence longer than the model's position table.
    Length { len: usize, max: usize },
    /// Lookup of an item or SID that does not exist.
    Lookup(String),
    /// Metric undefined for the given inputs (e.g. zero NPG denominator).
    UndefinedMetric(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
            Error::Degenerate(what) => write!(f, "degenerate input: {what}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Length { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::Lookup(msg) => write!(f, "lookup failed: {msg}"),
            Error::UndefinedMetric(what) => write!(f, "undefined metric: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
