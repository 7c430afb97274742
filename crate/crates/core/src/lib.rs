//! Category-level text-to-image retrieval that fuses text-to-image
//! similarity with similarity between generated query images and the
//! database, through a trainable attention aggregator and a learned mixing
//! weight.
//!
//! All embeddings are precomputed; see [`store`] for the file formats.

pub mod aggregator;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod linalg;
pub mod similarity;
pub mod store;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
