//! `cir` command line and HTTP service.

pub mod cli;
pub mod server;
pub mod setup;

use thiserror::Error;

/// How a command ended, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// Some queries failed; their error traces were still written.
    Partial,
}

#[derive(Debug, Error)]
pub enum AppError {
    /// Bad flags or unusable input files.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Failed(_) => EXIT_FAILED,
        }
    }

    /// Sorts a core error into usage (bad input) or failure (runtime), prefixed with `context`.
    pub fn from_core(context: impl std::fmt::Display, err: cir_core::Error) -> Self {
        use cir_core::Error as E;
        let message = format!("{context}: {err}");
        match err {
            E::Io(_)
            | E::Parse { .. }
            | E::Config(_)
            | E::Integrity { .. }
            | E::InvalidInput(_)
            | E::InvalidK(_)
            | E::UnsupportedTask(_)
            | E::MissingSubset(_)
            | E::ChecksumMismatch { .. }
            | E::EmptyEval
            | E::EmptyGallery
            | E::DuplicateId(_)
            | E::DimMismatch { .. } => AppError::Usage(message),
            _ => AppError::Failed(message),
        }
    }
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Complete => EXIT_OK,
            Outcome::Partial => EXIT_PARTIAL,
        }
    }
}
