//! Message passing over sampled subgraphs with hand-derived gradients.

mod params;
mod propagate;

pub use params::{Aggregator, LayerParams, ModelParams, Tensor, DEFAULT_LEAKY_SLOPE};
pub use propagate::{attention_scores, forward_tree, heads, is_active, sigmoid, TreeTrace};
