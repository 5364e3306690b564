use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A NaN or infinity showed up while running `stage`.
    #[error("non-finite value in {stage} at step {step}")]
    NumericOverflow { stage: &'static str, step: usize },

    /// The gradient used as a task embedding has zero norm.
    #[error("degenerate embedding: gradient norm is zero")]
    DegenerateEmbedding,

    #[error("expert {index}: {source}")]
    Expert {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn for_expert(self, index: usize) -> Self {
        Error::Expert {
            index,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a non-finite value.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericOverflow { .. } => true,
            Error::Expert { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
