use std::path::PathBuf;

/// Errors of the IO layer and pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM: {reason}")]
    Pgm { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Annotation { path: PathBuf, line: usize, reason: String },
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: header says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] diffvqa_core::error::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code: 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        use diffvqa_core::error::Error as C;
        match self {
            Error::Core(C::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}
