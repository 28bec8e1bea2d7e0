use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op} expects rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("label {label} outside [0, {classes})")]
    LabelRange { label: usize, classes: usize },
    #[error("variable does not belong to this tape")]
    Provenance,
    #[error("{step} step consumed a {got} batch; only {expected} batches are allowed")]
    BatchSplit {
        step: &'static str,
        expected: &'static str,
        got: &'static str,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid search space: {0}")]
    Spec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("degenerate network: {0}")]
    Degenerate(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl fmt::Debug, got: impl fmt::Debug) -> Self {
        Error::Dimension {
            op,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
