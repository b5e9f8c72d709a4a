use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("no reference masks available")]
    NoReferenceMasks,

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, sample {sample}: loss = {loss}")]
    TrainingDivergence { epoch: usize, sample: usize, loss: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("provider failure: {0}")]
    Provider(String),

    #[error("invalid prompt transition for prompt {id}: {from:?} -> {to:?}")]
    InvalidTransition {
        id: usize,
        from: crate::sampler::PromptStatus,
        to: crate::sampler::PromptStatus,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad or unreadable input data rather than a
    /// failure while computing.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Dimension(_)
                | Error::UndefinedMetric(_)
        )
    }
}
