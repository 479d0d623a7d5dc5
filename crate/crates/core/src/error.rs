//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Autodiff tape misuse (wrong tape, non-scalar backward, reuse).
    #[error("tape error: {0}")]
    Tape(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// A numeric result left the finite range.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },

    /// Dataset entry failed validation or could not be loaded.
    #[error("dataset error for sample {id}: {detail}")]
    Dataset { id: String, detail: String },

    /// Weight / float container parse or validation failure.
    #[error("container error in field {field}: {detail}")]
    Container { field: String, detail: String },

    /// LIME surrogate system could not be solved.
    #[error("singular surrogate system: {0}")]
    SingularSystem(String),

    /// Pipeline stage failure with enough context to locate the culprit.
    #[error("stage {stage} failed{}: {detail}", sample_suffix(.sample))]
    Stage {
        stage: &'static str,
        sample: Option<String>,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

fn sample_suffix(sample: &Option<String>) -> String {
    match sample {
        Some(id) => format!(" (sample {id})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn stage(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            sample: None,
            detail: detail.into(),
        }
    }

    pub fn stage_sample(
        stage: &'static str,
        sample: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Stage {
            stage,
            sample: Some(sample.into()),
            detail: detail.into(),
        }
    }
}
