//! Knowledge cache-driven federated edge learning.
//!
//! Clients distill their local data into one synthetic sample per class with
//! a kernel-ridge-regression objective over their own feature extractor, upload
//! the result to a server-side knowledge cache, and train personalized models
//! on local data plus a distribution-aware sample of the cache. Every transfer
//! is charged to a byte-exact ledger so the protocol can be compared against a
//! logits-cache baseline and parameter averaging.

pub mod cache;
pub mod config;
pub mod data;
pub mod distill;
pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod output;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
