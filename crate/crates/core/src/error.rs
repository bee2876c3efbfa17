use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: output must hold exactly one element, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("backward: graph inputs were rebound and the graph has not been re-evaluated")]
    NotEvaluated,

    #[error("unknown input `{0}`")]
    UnknownInput(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    /// Training hit a non-finite value; `last_good` holds the state before
    /// the failing step.
    #[error("training aborted in phase {phase} at step {step}: {reason}")]
    Diverged {
        phase: u8,
        step: usize,
        reason: String,
        last_good: Option<Box<crate::trainer::Checkpoint>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Prefixes a validation message with the config section it came from.
pub(crate) fn scoped(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Invalid(m) => Error::Invalid(format!("{section}.{m}")),
        other => other,
    })
}
