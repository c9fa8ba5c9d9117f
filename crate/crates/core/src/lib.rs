//! Graph-aware token reduction and cascaded text-encoder → GNN training for
//! text-attributed graphs.
//!
//! The pipeline scores each node's tokens with a cross-attention module whose
//! query comes from neighbor-averaged text features, keeps the top-scoring
//! tokens, concatenates a node's kept tokens with those of random-walk sampled
//! neighbors, trains a small attention encoder on those sequences, and finally
//! trains a GraphSAGE network on the frozen encoder output.

pub mod baselines;
pub mod error;
pub mod gnn;
pub mod gradsuite;
pub mod graph;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod raw;
pub mod reduction;
pub mod sampler;
pub mod sequence;
pub mod text;

pub use error::{Error, Result};
