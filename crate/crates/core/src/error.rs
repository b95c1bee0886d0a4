use thiserror::Error;

/// Errors raised anywhere in the verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("soundness error: {0}")]
    Soundness(String),

    #[error("state error: {0}")]
    State(String),

    #[error("instance too large: {0}")]
    Size(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Process exit status: 2 for usage, configuration and input problems,
    /// 3 for numeric and soundness failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::State(_) | Error::Parse { .. } | Error::Io(_) => 2,
            Error::Numeric(_) | Error::Soundness(_) | Error::Size(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::parse(3, "x").exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 3);
        assert_eq!(Error::Soundness("x".into()).exit_code(), 3);
    }
}
