use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiscError>;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: non-finite gradient reached `{op}` node")]
    NonFiniteGradient { op: &'static str },

    #[error("backward: loss must be a finite 1x1 tensor, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DiscError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DiscError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
