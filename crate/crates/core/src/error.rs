use std::io;

use thiserror::Error;

/// Errors surfaced by the engine.
///
/// The variants line up with the CLI exit codes: configuration problems
/// (1), violated contracts or invariants (2) and I/O failures (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("contract violation at decode step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Format(_) => 1,
            Error::Contract(_) | Error::AtStep { .. } => 2,
            Error::Io(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(Error::config("x").exit_code(), 1);
        assert_eq!(Error::format("x").exit_code(), 1);
        let json = serde_json::from_str::<u8>("{").unwrap_err();
        assert_eq!(Error::from(json).exit_code(), 1);
        assert_eq!(Error::contract("x").exit_code(), 2);
        let at = Error::AtStep { step: 3, source: Box::new(Error::contract("x")) };
        assert_eq!(at.exit_code(), 2);
        assert!(at.to_string().contains("step 3"));
        assert_eq!(Error::from(io::Error::other("x")).exit_code(), 3);
    }
}
