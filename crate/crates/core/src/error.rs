use thiserror::Error;

/// Every failure the engine can report. The CLI maps the variants onto
/// its stable exit codes (see `Error::exit_code`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-parsable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Batch(_) => "batch",
            Error::Numerical(_) => "numerical",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::DigestMismatch(_) => "digest_mismatch",
            Error::Io { .. } => "io",
        }
    }

    /// 0 success, 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DigestMismatch(_) | Error::Contract(_) => 2,
            Error::Dimension(_) => 2,
            Error::Numerical(_) => 4,
            Error::Data(_)
            | Error::Batch(_)
            | Error::DegenerateBatch(_)
            | Error::CorruptCheckpoint(_)
            | Error::Io { .. } => 3,
        }
    }
}
