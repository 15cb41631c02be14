use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("module {0} has no routed tokens")]
    EmptyModule(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Shape {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
