use thiserror::Error;

/// Errors produced by the engine.
///
/// `InvalidConfig` covers contract violations a caller can fix by changing
/// inputs; `Data`/`Checkpoint`/`Io` cover problems with external artifacts.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("alpha {0} outside supported range [{min}, {max}]", min = crate::entmax::ALPHA_MIN, max = crate::entmax::ALPHA_MAX)]
    AlphaOutOfRange(f64),

    #[error("input is not on the probability simplex (sum = {sum})")]
    NotOnSimplex { sum: f64 },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty supervision: mask selects no targets")]
    EmptySupervision,

    #[error("training diverged at iteration {iter}: loss is not finite")]
    Diverged { iter: usize },

    #[error("data error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn data_at(line: usize, msg: impl Into<String>) -> Self {
        CoreError::Data {
            line: Some(line),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
