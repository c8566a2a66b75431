use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("no valid choice: every candidate is masked")]
    NoValidChoice,

    #[error("no valid action: no grounded action satisfies the preconditions")]
    NoValidAction,

    #[error("unknown parameter `{0}`")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("transition {index} cannot be replayed: {reason}")]
    Replay { index: usize, reason: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("environment error: {0}")]
    Environment(#[source] Box<dyn std::error::Error + Send + Sync>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context: context.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
