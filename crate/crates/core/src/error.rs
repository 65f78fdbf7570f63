use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("hdf5 error: {0}")]
    Hdf5(String),
    #[error("missing dataset `{name}` in {path}")]
    MissingDataset { path: PathBuf, name: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bag `{0}` is empty after filtering")]
    EmptyAfterFilter(String),
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("duplicate slide_id `{0}` in manifest")]
    DuplicateSlide(String),
    #[error("patient `{0}` has slides with conflicting targets")]
    ConflictingTarget(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(i64),
    #[error("mask has no valid instances")]
    AllMasked,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("roc auc needs both classes present")]
    SingleClass,
    #[error("too few patients for {k}-fold split: {detail}")]
    TooFewPatients { k: usize, detail: String },
    #[error("training split is empty")]
    EmptyTrainingSplit,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Stable, machine-readable category used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Hdf5(_) | Error::MissingDataset { .. } | Error::ShapeMismatch(_) => "bag_format",
            Error::EmptyAfterFilter(_) => "empty_bag",
            Error::ManifestParse(_) | Error::DuplicateSlide(_) | Error::ConflictingTarget(_) => {
                "manifest"
            }
            Error::Config(_) => "config",
            Error::Dim(_) | Error::LengthMismatch(..) => "dimension",
            Error::InvalidArgument(_) | Error::InvalidLabel(_) | Error::AllMasked => "argument",
            Error::SingleClass | Error::TooFewPatients { .. } | Error::EmptyTrainingSplit => "data",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
