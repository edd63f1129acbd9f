use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("cross entropy over zero non-ignored positions is undefined")]
    UndefinedMean,

    #[error("rank error: expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },

    #[error("registration error: {0}")]
    Registration(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("alignment error: {tokens} tokens but {labels} labels")]
    Alignment { tokens: usize, labels: usize },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("data error in objective `{objective}`: {detail}")]
    Data { objective: String, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("synthetic domain spec error: {0}")]
    Spec(String),

    #[error("corrupt checkpoint at {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("non-finite loss {value} for objective `{objective}` at update {update}")]
    NonFiniteLoss {
        objective: String,
        update: u64,
        value: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
