use thiserror::Error;

/// Errors raised across the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged ({context}): {detail}")]
    Divergence { context: String, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("instance too large: {0}")]
    InstanceTooLarge(String),

    #[error("correctness failure: {0}")]
    Correctness(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn divergence(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Divergence {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Prefix the context of a divergence error; other variants pass through.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Divergence { context, detail } => Error::Divergence {
                context: if context.is_empty() {
                    ctx.to_string()
                } else {
                    format!("{ctx}, {context}")
                },
                detail,
            },
            other => other,
        }
    }
}
