use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] fuseseg_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint spec hash {found} does not match the requested spec ({expected})")]
    SpecMismatch { expected: String, found: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for invalid input or configuration, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use fuseseg_core::Error as Core;
        match self {
            Error::Validation(_) | Error::SpecMismatch { .. } => 2,
            Error::Core(Core::Config(_) | Core::UnknownVariant { .. }) => 2,
            _ => 3,
        }
    }
}
