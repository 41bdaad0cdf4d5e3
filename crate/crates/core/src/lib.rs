//! Latent-distance guided alignment training at desk scale.
//!
//! Train a small byte-level language model on a gold corpus, train a
//! conditional auto-encoder guide by response reconstruction, and iteratively
//! align the language model to the corpus with a per-instance
//! latent-distance-weighted preference objective, with verification harnesses
//! for the core formulas.

pub mod align;
pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod guide;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use error::{Error, Result};
