//! Retrieval-augmented BHD diagnosis from CT slices.
//!
//! The crate covers the whole pipeline: corpus construction from CT volumes,
//! a baseline featurizer, a cosine-margin embedding retriever with an exact
//! top-k index, prompt assembly for a pluggable multimodal generator, and an
//! evaluation harness with k sweeps and ablations.

mod binfmt;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod featurizer;
pub mod generator;
pub mod orchestrator;
pub mod retriever;
pub mod synthetic;

pub use error::{Error, Result};
