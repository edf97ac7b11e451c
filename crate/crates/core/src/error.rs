use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("{what} = {value} is out of range ({expected})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn out_of_range(what: &'static str, value: f64, expected: &'static str) -> Self {
        Error::OutOfRange {
            what,
            value,
            expected,
        }
    }
}
