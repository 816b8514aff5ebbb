use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown treatment code {0} (expected 1=CRT or 2=TMZ)")]
    Vocabulary(u8),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(
        "non-finite loss at step {step} (t={t}): total={total}, weighted_mse={weighted_mse}, seg={seg}"
    )]
    NonFiniteLoss {
        step: u64,
        t: usize,
        total: f64,
        weighted_mse: f64,
        seg: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
