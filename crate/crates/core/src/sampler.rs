//! Random-walk-with-restart neighbor sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::numerics::{RngStream, STREAM_SAMPLER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RwrConfig {
    pub walk_steps: usize,
    pub restart_probability: f64,
}

impl Default for RwrConfig {
    fn default() -> Self {
        Self {
            walk_steps: 16,
            restart_probability: 0.5,
        }
    }
}

impl RwrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.restart_probability) {
            return Err(Error::invalid("restart probability must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Distinct non-root nodes visited by a walk, in first-visit order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSample {
    pub root: usize,
    pub neighbors: Vec<usize>,
}

/// Node occupied after each of `walk_steps` transitions. Each transition
/// returns to `root` with the restart probability and otherwise moves to a
/// uniformly chosen neighbor. An isolated root never moves.
pub fn rwr_walk<R: Rng + ?Sized>(
    graph: &TextAttributedGraph,
    root: usize,
    config: &RwrConfig,
    rng: &mut R,
) -> Vec<usize> {
    let mut current = root;
    let mut path = Vec::with_capacity(config.walk_steps);
    for _ in 0..config.walk_steps {
        let ns = graph.neighbors(current);
        current = if ns.is_empty() || rng.random::<f64>() < config.restart_probability {
            root
        } else {
            ns[rng.random_range(0..ns.len())]
        };
        path.push(current);
    }
    path
}

pub fn rwr_sample<R: Rng + ?Sized>(
    graph: &TextAttributedGraph,
    root: usize,
    config: &RwrConfig,
    rng: &mut R,
) -> NeighborSample {
    let mut neighbors = Vec::new();
    for node in rwr_walk(graph, root, config, rng) {
        if node != root && !neighbors.contains(&node) {
            neighbors.push(node);
        }
    }
    NeighborSample { root, neighbors }
}

/// Samples every node with its own sub-stream derived from `(seed, root)`, so
/// each root's sample is reproducible in isolation.
pub fn sample_all(graph: &TextAttributedGraph, config: &RwrConfig, seed: u64) -> Vec<NeighborSample> {
    (0..graph.num_nodes())
        .map(|root| {
            let mut rng = RngStream::derive(seed, STREAM_SAMPLER, root as u64);
            rwr_sample(graph, root, config, &mut rng)
        })
        .collect()
}
