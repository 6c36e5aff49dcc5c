use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value at coordinate {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
}

pub type Result<T> = std::result::Result<T, AutogradError>;
