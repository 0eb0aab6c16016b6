use std::fmt;

use helix_core::Error;

pub const BAD_INPUT: u8 = 2;
pub const NUMERICAL: u8 = 3;
pub const IO: u8 = 4;
pub const HANDSHAKE: u8 = 5;
pub const SWEEP_FAILED: u8 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn bad_input(message: impl Into<String>) -> Self {
        Self::new(BAD_INPUT, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(IO, message)
    }

    /// Prefixes the message with what was being attempted.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } | Error::Degenerate(_) | Error::Saturated(_) => {
            NUMERICAL
        }
        Error::Io(_) | Error::Csv(_) => IO,
        Error::Backend(_) => HANDSHAKE,
        _ => BAD_INPUT,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(code_for(&e), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
