//! Std companion to `sarcex-core`: dataset files, the ConceptNet client
//! and cache, visual backend adapters, artifact formats, run configuration
//! and the pipeline stages behind the `sarcex` command.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod knowledge;
pub mod pipeline;
pub mod transport;
pub mod vision;

pub use error::{Error, Result};
