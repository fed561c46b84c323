//! Session-aware query auto-completion with prefix-aware label trees.
//!
//! The pipeline turns a search log into `(previous query, prefix, next
//! query)` triplets, encodes the context with TF-IDF features, arranges the
//! candidate next queries in a label tree and trains one linear ranker per
//! tree node. Suggestions come from a beam search over that tree.

pub mod corpus;
pub mod embed;
pub mod engine;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod pipeline;
pub mod sparse;
pub mod synth;
pub mod vectorize;

pub use error::{Error, Result};
