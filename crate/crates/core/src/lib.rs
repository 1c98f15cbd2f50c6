//! Semi-supervised customs fraud detection: tree-ensemble cross features, a
//! transaction graph with importer and HS-code nodes, attention message
//! passing, self-supervised pretraining and dual-task fine-tuning.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod gnn;
pub mod graph;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
