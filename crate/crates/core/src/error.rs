use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("numeric guard tripped in {op}: {detail}")]
    NumericGuard { op: &'static str, detail: String },
    #[error("{what} index {index} out of bounds (size {bound})")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite loss {value} at {context}")]
    NonFiniteLoss { value: f64, context: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
