use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("illegal action: {0}")]
    IllegalAction(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid instance: {0}")]
    Invalid(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("level generation failed after {0} attempts")]
    Generation(usize),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

impl From<EnvError> for relrl_core::Error {
    fn from(e: EnvError) -> Self {
        relrl_core::Error::Environment(Box::new(e))
    }
}

pub(crate) fn parse_err(line: usize, message: impl Into<String>) -> EnvError {
    EnvError::Parse {
        line,
        message: message.into(),
    }
}
