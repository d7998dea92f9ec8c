use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FgaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FgaError {
    /// Operand shapes do not conform for the requested primitive.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive produced (or was fed) NaN or an infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Graph or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset record violated the schema.
    #[error("schema error in record `{record_id}` field `{field}`: {detail}")]
    Schema {
        record_id: String,
        field: String,
        detail: String,
    },

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("batch norm `{0}` evaluated before running statistics were available")]
    BatchNormUninitialized(String),

    /// Training loss became NaN or infinite.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    /// Analytic and finite-difference gradients disagree.
    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error("malformed checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

impl FgaError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        FgaError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        FgaError::Json {
            context: context.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        FgaError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn schema(
        record_id: impl Into<String>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        FgaError::Schema {
            record_id: record_id.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 1 usage/configuration, 2 data or schema, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            FgaError::InvalidArgument(_) | FgaError::Config(_) => 1,
            FgaError::Schema { .. }
            | FgaError::OutOfVocabulary { .. }
            | FgaError::Checkpoint { .. }
            | FgaError::Io { .. }
            | FgaError::Json { .. }
            | FgaError::Csv(_) => 2,
            FgaError::Shape { .. }
            | FgaError::NonFinite { .. }
            | FgaError::BatchNormUninitialized(_)
            | FgaError::Diverged { .. }
            | FgaError::GradientMismatch(_) => 3,
        }
    }
}
