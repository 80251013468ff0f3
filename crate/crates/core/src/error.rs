use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(std::path::PathBuf),

    #[error("run directory locked: {}", .0.display())]
    Locked(std::path::PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::MissingInput(_) => "missing-input",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for the error class; 0 and 1 are never used.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) => 3,
            Error::Schema(_) | Error::Json(_) => 4,
            Error::VersionMismatch { .. } => 5,
            Error::Checkpoint(_) => 6,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => 7,
            Error::NonFinite(_) => 8,
            Error::Locked(_) => 9,
            Error::Io(_) => 10,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
