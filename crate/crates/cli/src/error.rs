use std::fmt;

use bihoi_core::CoreError;
use bihoi_models::ModelError;
use bihoi_nn::NnError;

/// Failure raised by the command layer itself.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn fail(kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    CliError::new(kind, message).into()
}

/// Typed name of the first recognised error in the chain.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.kind;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<NnError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound { "FileNotFound" } else { "IoError" };
        }
    }
    "Error"
}
