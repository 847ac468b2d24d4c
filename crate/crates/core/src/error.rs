use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown task index {index} (model knows {known} tasks)")]
    UnknownTask { index: usize, known: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{stage} failed at task {task}: {source}")]
    Stage {
        stage: &'static str,
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str, task: usize) -> Self {
        Error::Stage {
            stage,
            task,
            source: Box::new(self),
        }
    }

    /// True for errors caused by caller input rather than broken internal state.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Invariant(_) => false,
            Error::Stage { source, .. } => source.is_user_error(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
