//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error, one variant family per subsystem so command-line
/// consumers can report module-qualified codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pedigree: {0}")]
    Pedigree(String),
    #[error("data: {0}")]
    Data(String),
    #[error("instruments: {0}")]
    Instruments(String),
    #[error("mr: {0}")]
    Mr(String),
    #[error("model: {0}")]
    Model(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("simulate: {0}")]
    Simulate(String),
    #[error("cli: {0}")]
    Cli(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Module-qualified code, e.g. `pedigree` for a pedigree ingestion error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Pedigree(_) => "pedigree",
            Error::Data(_) => "data",
            Error::Instruments(_) => "instruments",
            Error::Mr(_) => "mr",
            Error::Model(_) => "model",
            Error::Sampler(_) => "sampler",
            Error::Simulate(_) => "simulate",
            Error::Cli(_) => "cli",
            Error::Io(_) => "io",
        }
    }
}
