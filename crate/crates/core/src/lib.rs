//! Spoken video grounding: locate the span of a video described by a noisy
//! spoken query.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode differentiation, layers, Adam.
//! - [`signal`]: WAV input, log-Mel front end, noise mixing.
//! - [`corpus`]: seeded synthetic grounding data and its file format.
//! - [`cpc`]: contrastive predictive coding on spectrograms.
//! - [`vgcl`]: video-guided curriculum pretraining.
//! - [`grounder`]: the grounding network, its losses and span decoding.
//! - [`harness`]: metrics, experiments, and the command line.

pub mod corpus;
pub mod cpc;
pub mod grounder;
pub mod harness;
pub mod numerics;
pub mod signal;
pub mod vgcl;

#[cfg(doctest)]
mod book;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// True for errors caused by bad input data rather than misuse.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Context { source, .. } => source.is_data_error(),
            Error::Corrupt(_) | Error::Wav(_) | Error::Io(_) | Error::Shape(_) => true,
            Error::Invalid(_) | Error::Config(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
