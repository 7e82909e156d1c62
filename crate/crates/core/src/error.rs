use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate mask: softmax slice {slice} has no finite entry")]
    DegenerateMask { slice: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("nifti parse error at byte {offset}: {message}")]
    NiftiParse { offset: usize, message: String },

    #[error("unsupported nifti datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::DegenerateMask { .. } => "degenerate_mask",
            Error::Contract(_) => "contract",
            Error::NiftiParse { .. } | Error::UnsupportedDatatype(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::Degenerate(_) => "degenerate",
            Error::Io { .. } => "io",
            Error::Json(_) => "format",
        }
    }
}
