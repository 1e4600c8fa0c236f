use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum GkrlsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rows with missing values (1-based data rows): {rows:?}")]
    MissingValues { rows: Vec<usize> },
    #[error("non-numeric value {value:?} in numeric column '{column}' at data row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular system in block '{block}'")]
    Singular { block: String },
    #[error("refusing dense kernel for N={n} (cap {cap}); use subsampling or force the build")]
    MemoryGuard { n: usize, cap: usize },
    #[error("failed to converge: {0}")]
    Convergence(String),
    #[error("fit on fold {fold} failed: {source}")]
    FoldFit {
        fold: usize,
        #[source]
        source: Box<GkrlsError>,
    },
    #[error("model file: {0}")]
    Format(String),
    #[error("model file integrity check failed (content hash mismatch)")]
    HashMismatch,
    #[error("model file format {found} is newer than the supported major version {supported}")]
    UnsupportedVersion { found: String, supported: u16 },
}

pub type Result<T> = std::result::Result<T, GkrlsError>;

impl GkrlsError {
    /// True for errors caused by the input data rather than the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            GkrlsError::Io { .. }
                | GkrlsError::Csv(_)
                | GkrlsError::MissingValues { .. }
                | GkrlsError::NonNumeric { .. }
                | GkrlsError::Data(_)
                | GkrlsError::Parse { .. }
                | GkrlsError::Spec(_)
        )
    }
}
