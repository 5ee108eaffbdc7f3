//! Unsupervised curation of large embedding collections.
//!
//! The pipeline has four stages, each in its own module:
//!
//! - [`store`]: binary embedding matrices and JSON-lines row metadata.
//! - [`kmeans`] and [`tree`]: Lloyd k-means and the bottom-up hierarchy of
//!   centroids built by clustering the previous level's centroids.
//! - [`sampler`]: top-down balanced allocation of a sample budget through
//!   the tree, with uniform draws inside bottom-level clusters.
//! - [`batches`]: training-batch plans stratified by top-level cluster,
//!   drawing the least-observed tiles first.
//!
//! [`diagnostics`] measures imbalance (total variation against uniform),
//! partition agreement (adjusted Rand index) and generates heavy-tailed
//! synthetic mixtures. The `curatree` binary wraps everything in [`cli`].
//!
//! With the default `parallel` feature the row-level loops run on rayon.
//! Output is identical with and without it.

pub mod batches;
pub mod cli;
pub mod diagnostics;
pub mod exec;
pub mod kmeans;
pub mod sampler;
pub mod store;
pub mod tree;

mod binio;
mod rng;

pub use batches::{BatchError, BatchPlan, CuratedTiles, ObservationLedger};
pub use exec::Exec;
pub use kmeans::{KMeansConfig, KMeansError, KMeansResult, Seeding};
pub use sampler::{AllocationPlan, CuratedSubset, SampleError, Target};
pub use store::{EmbeddingMatrix, RowMetadata, StoreError};
pub use tree::{ClusterTree, TreeConfig, TreeError};
