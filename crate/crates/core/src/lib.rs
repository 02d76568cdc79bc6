//! Temporal knowledge graph reasoning over evolutionary event chains.
//!
//! The crate ingests timestamped quadruple datasets, builds query-specific
//! chains of chronologically ordered neighbor events, encodes each chain
//! branch with a small Transformer encoder, mixes branch context with an
//! MLP-based mixer, and scores entities and timestamps for link prediction
//! and auxiliary time prediction. Training, evaluation and checkpointing are
//! included; the `ecechain` binary in the companion CLI crate drives the
//! whole pipeline.

pub mod data;
pub mod ece;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
