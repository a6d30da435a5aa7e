//! Test-time learning of negative semantics for out-of-distribution
//! detection over streams of vision-language embeddings.
//!
//! The detector scores each incoming image embedding against ID class text
//! features and a set of negative text features: static negatives mined
//! from a vocabulary before the stream starts, plus a bank of negatives
//! learned at test time by inverting potential OOD images into the text
//! space. See the `book/` directory for a guided tour.

pub mod bank;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod negatives;
pub mod rng;
pub mod scoring;
pub mod theorem;
pub mod vector;
pub mod world;

pub use error::{Error, Result};

/// Snippets of the guide in `book/src`, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/negatives.md")]
    mod negatives {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/inversion.md")]
    mod inversion {}
    #[doc = include_str!("../../../book/src/bank.md")]
    mod bank {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/worlds.md")]
    mod worlds {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
