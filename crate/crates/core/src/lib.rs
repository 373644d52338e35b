//! Extended factorized hierarchical variational autoencoder for separating
//! sequence-level (subject) and segment-level (content) factors of short
//! multichannel time-series windows, with a synthetic parallel corpus and a
//! probe-based disentanglement evaluation.

pub mod cli;
pub mod error;
pub mod fsio;
pub mod model;
pub mod objective;
pub mod probes;
pub mod rng;
pub mod seqnet;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
