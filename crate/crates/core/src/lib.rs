//! Inverted-file approximate nearest-neighbor search over dense float
//! vectors, with a large coarse codebook searched through a proximity graph,
//! per-region subcentroid grouping, subregion pruning and product-quantized
//! reranking.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod index;
pub mod kmeans;
pub mod pq;
pub mod search;
pub mod vectors;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use vectors::VectorSet;
