use thiserror::Error;

/// Errors produced anywhere in the correspondence pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("backward requires a scalar output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("{op} needs at least {need} rows, got {got}")]
    TooFewRows { op: &'static str, need: usize, got: usize },
    #[error("need at least 8 effectively weighted correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at record {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of the numbers rather than of the inputs or the environment.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Diverged(_) | Error::Degenerate(_) | Error::TooFewCorrespondences(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
