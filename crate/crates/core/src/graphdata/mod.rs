//! Graph containers, dataset files, mini-batching and adjacency
//! normalisation.

mod batch;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};

pub use batch::{
    batch_graphs, batch_order, normalize_adjacency, BatchedGraph, NormalizedAdjacency,
};
pub use io::{load_dataset, save_dataset, write_dataset, SplitEntry, SplitManifest, MANIFEST_FILE};

/// Node feature width: RGB followed by 2-D coordinates.
pub const FEATURE_DIM: usize = 5;

/// Ground-truth provenance of an edge, known only for generated data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeTag {
    Causal,
    Bias,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphInstance {
    pub id: String,
    pub num_nodes: usize,
    /// Row-major, `FEATURE_DIM` values per node.
    pub x: Vec<f64>,
    /// Undirected edges, each stored once.
    pub edges: Vec<(usize, usize)>,
    pub y: usize,
    pub bias_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_tag: Option<Vec<EdgeTag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_weight: Option<Vec<f64>>,
    /// Generator coin: `true` when the bias colour was forced to the
    /// class colour.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biased: Option<bool>,
}

impl GraphInstance {
    pub fn features(&self, node: usize) -> &[f64] {
        &self.x[node * FEATURE_DIM..(node + 1) * FEATURE_DIM]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.num_nodes * FEATURE_DIM {
            return Err(DiscError::invalid(
                "x",
                format!(
                    "expected {} values ({} nodes x {FEATURE_DIM}), got {}",
                    self.num_nodes * FEATURE_DIM,
                    self.num_nodes,
                    self.x.len()
                ),
            ));
        }
        if let Some(v) = self.x.iter().find(|v| !v.is_finite()) {
            return Err(DiscError::invalid("x", format!("non-finite feature {v}")));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.edges.len());
        for &(i, j) in &self.edges {
            if i >= self.num_nodes || j >= self.num_nodes {
                return Err(DiscError::invalid(
                    "edges",
                    format!("edge ({i}, {j}) out of range for {} nodes", self.num_nodes),
                ));
            }
            if i == j {
                return Err(DiscError::invalid(
                    "edges",
                    format!("self-loop at node {i}"),
                ));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(DiscError::invalid(
                    "edges",
                    format!("duplicate undirected edge ({i}, {j})"),
                ));
            }
        }
        if let Some(tags) = &self.edge_tag {
            if tags.len() != self.edges.len() {
                return Err(DiscError::invalid(
                    "edge_tag",
                    format!("{} tags for {} edges", tags.len(), self.edges.len()),
                ));
            }
        }
        if let Some(w) = &self.edge_weight {
            if w.len() != self.edges.len() {
                return Err(DiscError::invalid(
                    "edge_weight",
                    format!("{} weights for {} edges", w.len(), self.edges.len()),
                ));
            }
            if let Some(v) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(DiscError::invalid(
                    "edge_weight",
                    format!("weight {v} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}
