use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("NaN gradient for parameter `{param}`")]
    NanGradient { param: String },

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("rank-deficient design matrix")]
    RankDeficient,

    #[error("infeasible corpus constraints: {0}")]
    Infeasible(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Config { .. } => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Empty(_) => "empty",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::NanGradient { .. } => "nan_gradient",
            Error::Divergence { .. } => "divergence",
            Error::RankDeficient => "rank_deficient",
            Error::Infeasible(_) => "infeasible",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
