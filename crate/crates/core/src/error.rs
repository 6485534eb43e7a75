use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("non-finite value produced by {op} at element {index}")]
    NonFinite { op: String, index: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible label sequence: {frames} frames available, at least {required} required")]
    Infeasible { frames: usize, required: usize },

    #[error("alignment contains no tokens")]
    NoTokens,

    #[error("mask row {row} permits no keys")]
    Mask { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("config error at line {line}: {detail}")]
    ConfigLine { line: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
