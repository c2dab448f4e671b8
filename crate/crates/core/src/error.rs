use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the command-line front end can map them onto
/// stable process exit codes (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("split consistency error: {0}")]
    Split(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("digest mismatch: {0}")]
    Digest(String),

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for this error class.
    ///
    /// 2 I/O, 3 split consistency, 4 data, 5 numeric failure, 6 digest
    /// mismatch. Everything else (configuration, shape and contract errors)
    /// exits with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Split(_) => 3,
            Error::Data(_) | Error::Parse { .. } | Error::UndefinedMetric(_) => 4,
            Error::Numeric(_) => 5,
            Error::Digest(_) | Error::Checksum(_) => 6,
            Error::Shape(_) | Error::Contract(_) | Error::Config(_) => 1,
        }
    }
}
