use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corrupt shard {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Dimension(_) => 2,
            Error::Lookup(_)
            | Error::Ingestion(_)
            | Error::Sampling(_)
            | Error::Checkpoint(_)
            | Error::Corruption { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::Evaluation(_) | Error::Numeric(_) | Error::Generation(_) => 4,
        }
    }
}
