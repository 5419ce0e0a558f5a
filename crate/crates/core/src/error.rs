use thiserror::Error;

pub type Result<T, E = CpError> = std::result::Result<T, E>;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum CpError {
    #[error("non-finite logit {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<CpError>,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        trajectory: Vec<f64>,
    },

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<CpError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CpError {
    pub fn config(msg: impl Into<String>) -> Self {
        CpError::Config(msg.into())
    }

    pub fn at_row(self, row: usize) -> Self {
        CpError::Row {
            row,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            CpError::NonFinite { .. } => "non_finite",
            CpError::ClassOutOfRange { .. } => "class_out_of_range",
            CpError::Config(_) => "config",
            CpError::Calibration(_) => "calibration",
            CpError::Shape { .. } => "shape",
            CpError::Row { source, .. } => source.kind(),
            CpError::Data(_) => "data",
            CpError::Parse { .. } => "parse",
            CpError::Diverged { .. } => "diverged",
            CpError::Trial { source, .. } => source.kind(),
            CpError::Io { .. } => "io",
            CpError::Json(_) => "json",
        }
    }
}
