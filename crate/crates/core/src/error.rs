//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Each variant is a named error class; the CLI maps
/// variants to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (shape mismatch, mixed
    /// layer ids, plan/model inconsistency, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An enrollment batch was empty or otherwise unusable.
    #[error("insufficient enrollment: {0}")]
    InsufficientEnrollment(String),

    /// A dataset archive was missing or corrupt.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// The pruning equivalence certificate exceeded tolerance. The build
    /// fails loudly rather than shipping a broken pruned model.
    #[error("pruning defect: {0}")]
    PruningDefect(String),

    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    /// A serialized artifact could not be read or written.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short class name, printed by the CLI alongside the message.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract-violation",
            Error::Config(_) => "configuration-error",
            Error::InsufficientEnrollment(_) => "insufficient-enrollment",
            Error::Ingestion(_) => "ingestion-error",
            Error::PruningDefect(_) => "pruning-defect",
            Error::Divergence(_) => "divergence",
            Error::Format(_) => "format-error",
            Error::Io(_) => "io-error",
        }
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PruningDefect(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
