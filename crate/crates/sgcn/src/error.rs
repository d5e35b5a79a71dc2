use thiserror::Error;

#[derive(Debug, Error)]
pub enum SgcnError {
    #[error("dimension mismatch: {op} with shapes {lhs:?} and {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SgcnError {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SgcnError::Config(_) | SgcnError::Vocab(_) => 1,
            SgcnError::Data(_) | SgcnError::Parse { .. } | SgcnError::Io(_) => 2,
            SgcnError::Numeric(_) | SgcnError::Dim { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, SgcnError>;
