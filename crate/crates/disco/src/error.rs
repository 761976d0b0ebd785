use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    /// Descriptor lengths of two inputs disagree.
    #[error("descriptor dimension mismatch: {what} has {found}, expected {expected}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] disco_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status reported by the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::DimensionMismatch { .. } | Self::Core(disco_core::Error::DimensionMismatch { .. }) => 3,
            _ => 2,
        }
    }
}
