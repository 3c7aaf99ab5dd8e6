use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("target sequence contains only padding")]
    EmptyTarget,

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("degenerate vector: norm below 1e-12")]
    DegenerateVector,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("corpus spec error: {0}")]
    Spec(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-deterministic function under gradient check")]
    NonDeterministic,

    #[error("numeric failure at epoch {epoch} step {step}: {detail}")]
    NumericFailure {
        epoch: usize,
        step: usize,
        detail: String,
        /// `dialogue_id:turn` of every example in the failing batch.
        batch: Vec<String>,
    },
}

impl Error {
    /// True for failures caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NumericFailure { .. })
    }
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
