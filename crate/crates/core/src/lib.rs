//! Supervised clustering of embeddings with a transformer relation encoder
//! and linkage predictor.
//!
//! The pipeline: build exact KNN neighbor lists, enhance every node with
//! attention over its small context neighborhood, score each node's
//! candidate links with a second attention stack and an MLP, keep links
//! above a threshold and take connected components with Union-Find.

pub mod cli;
pub mod cluster;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod train;

pub use error::{LinkError, Result};
