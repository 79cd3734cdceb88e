use std::fmt;

use mvcl_core::Error;

/// Exit status 1: the inputs were rejected before or while being read.
pub const VALIDATION: u8 = 1;
/// Exit status 2: a run failed (I/O, numerics, a failed check).
pub const RUNTIME: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Data { .. } | Error::Dataset(_) | Error::Checkpoint(_) | Error::Json(_) => VALIDATION,
            _ => RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}
