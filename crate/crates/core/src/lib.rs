//! Algorithmic core for knowledge-augmented multimodal sarcasm explanation.
//!
//! Everything here is pure computation over owned data and only needs
//! `alloc`: text handling, knowledge enrichment, token-graph construction,
//! graph convolutions, gated shared fusion, a small reverse-mode autodiff
//! tape, a compact encoder-decoder backbone and generation metrics. IO,
//! network clients and the command line live in the `sarcex` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod corpus;
pub mod enrich;
pub mod fusion;
pub mod generator;
pub mod error;
pub mod graph;
mod hash;
pub mod knowledge;
pub mod reasoner;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod text;
pub mod visual;

pub use error::{CoreError, Result};
pub use hash::{fnv1a, keyed_rng};
pub use matrix::Matrix;
