use std::sync::Arc;

use rand::seq::SliceRandom;

use super::{GraphInstance, FEATURE_DIM};
use crate::autodiff::Tensor;
use crate::error::{DiscError, Result};
use crate::rng;

/// Disjoint union of several graphs with node indices offset per graph.
#[derive(Clone, Debug)]
pub struct BatchedGraph {
    /// `num_nodes x FEATURE_DIM`
    pub features: Tensor,
    /// Global undirected edges, grouped by graph.
    pub edges: Vec<(usize, usize)>,
    /// One weight per undirected edge; 1.0 where nothing was supplied.
    pub edge_weights: Vec<f64>,
    pub graph_index: Arc<[usize]>,
    /// `node_offsets[g]..node_offsets[g + 1]` are the nodes of graph `g`.
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    pub labels: Vec<usize>,
    pub bias_labels: Vec<usize>,
    pub ids: Vec<String>,
    /// Directed expansion: the first half is `(i, j)` for every undirected
    /// edge, the second half `(j, i)`.
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Undirected edge index of each directed edge.
    pub directed_edge: Arc<[usize]>,
}

impl BatchedGraph {
    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes_per_graph(&self) -> Vec<usize> {
        self.node_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Assemble a batch. Per-graph weights, when given, override any weights the
/// graphs carry; otherwise stored `edge_weight` fields are used, and unit
/// weights for graphs without them.
pub fn batch_graphs(
    graphs: &[&GraphInstance],
    edge_weights: Option<&[Vec<f64>]>,
) -> Result<BatchedGraph> {
    if let Some(w) = edge_weights {
        if w.len() != graphs.len() {
            return Err(DiscError::invalid(
                "edge_weights",
                format!("{} weight lists for {} graphs", w.len(), graphs.len()),
            ));
        }
        for (g, w) in graphs.iter().zip(w) {
            if w.len() != g.edges.len() {
                return Err(DiscError::invalid(
                    "edge_weights",
                    format!(
                        "graph `{}`: {} weights for {} edges",
                        g.id,
                        w.len(),
                        g.edges.len()
                    ),
                ));
            }
        }
    }
    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let total_edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
    let mut features = Vec::with_capacity(total_nodes * FEATURE_DIM);
    let mut edges = Vec::with_capacity(total_edges);
    let mut weights = Vec::with_capacity(total_edges);
    let mut graph_index = Vec::with_capacity(total_nodes);
    let mut node_offsets = vec![0];
    let mut edge_offsets = vec![0];
    for (gi, g) in graphs.iter().enumerate() {
        let off = node_offsets[gi];
        features.extend_from_slice(&g.x);
        graph_index.extend(std::iter::repeat_n(gi, g.num_nodes));
        edges.extend(g.edges.iter().map(|&(i, j)| (i + off, j + off)));
        match (edge_weights, &g.edge_weight) {
            (Some(w), _) => weights.extend_from_slice(&w[gi]),
            (None, Some(w)) => weights.extend_from_slice(w),
            (None, None) => weights.extend(std::iter::repeat_n(1.0, g.edges.len())),
        }
        node_offsets.push(off + g.num_nodes);
        edge_offsets.push(edges.len());
    }
    let u = edges.len();
    let src: Vec<usize> = edges
        .iter()
        .map(|e| e.0)
        .chain(edges.iter().map(|e| e.1))
        .collect();
    let dst: Vec<usize> = edges
        .iter()
        .map(|e| e.1)
        .chain(edges.iter().map(|e| e.0))
        .collect();
    let directed_edge: Vec<usize> = (0..u).chain(0..u).collect();
    Ok(BatchedGraph {
        features: Tensor::new(total_nodes, FEATURE_DIM, features)?,
        edges,
        edge_weights: weights,
        graph_index: graph_index.into(),
        node_offsets,
        edge_offsets,
        labels: graphs.iter().map(|g| g.y).collect(),
        bias_labels: graphs.iter().map(|g| g.bias_label).collect(),
        ids: graphs.iter().map(|g| g.id.clone()).collect(),
        src: src.into(),
        dst: dst.into(),
        directed_edge: directed_edge.into(),
    })
}

/// Symmetric normalisation `D^-1/2 (A_w + I) D^-1/2` in edge-list form.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    /// Diagonal entries `1 / d_i`.
    pub self_coef: Vec<f64>,
    /// Off-diagonal entry for each undirected edge (same in both directions).
    pub edge_coef: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl NormalizedAdjacency {
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.self_coef.len();
        let mut m = vec![vec![0.0; n]; n];
        for (i, &s) in self.self_coef.iter().enumerate() {
            m[i][i] = s;
        }
        for (&(i, j), &c) in self.edges.iter().zip(&self.edge_coef) {
            m[i][j] += c;
            m[j][i] += c;
        }
        m
    }
}

pub fn normalize_adjacency(batch: &BatchedGraph) -> Result<NormalizedAdjacency> {
    if let Some(w) = batch
        .edge_weights
        .iter()
        .find(|w| !(0.0..=1.0).contains(*w))
    {
        return Err(DiscError::invalid(
            "edge_weights",
            format!("weight {w} outside [0, 1]"),
        ));
    }
    let n = batch.num_nodes();
    let mut degree = vec![1.0; n];
    for (&(i, j), &w) in batch.edges.iter().zip(&batch.edge_weights) {
        degree[i] += w;
        degree[j] += w;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(NormalizedAdjacency {
        self_coef: degree.iter().map(|d| 1.0 / d).collect(),
        edge_coef: batch
            .edges
            .iter()
            .zip(&batch.edge_weights)
            .map(|(&(i, j), &w)| w * inv_sqrt[i] * inv_sqrt[j])
            .collect(),
        edges: batch.edges.clone(),
    })
}

/// Seeded shuffle of `0..len` cut into batches of at most `batch_size`.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, "shuffle", epoch));
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::graph;
    use super::*;
    use rand::Rng;

    #[test]
    fn single_graph_offsets_are_identity() {
        let g = graph("a", 3, &[(0, 1), (1, 2)], 1);
        let b = batch_graphs(&[&g], None).unwrap();
        assert_eq!(b.edges, g.edges);
        assert_eq!(&*b.graph_index, &[0, 0, 0]);
        assert_eq!(b.edge_weights, vec![1.0, 1.0]);
    }

    #[test]
    fn second_graph_is_shifted() {
        let a = graph("a", 3, &[(0, 1), (1, 2)], 1);
        let c = graph("c", 2, &[(0, 1)], 0);
        let b = batch_graphs(&[&a, &c], None).unwrap();
        assert_eq!(b.edges, vec![(0, 1), (1, 2), (3, 4)]);
        assert_eq!(&*b.graph_index, &[0, 0, 0, 1, 1]);
        assert_eq!(b.labels, vec![1, 0]);
        assert_eq!(b.node_offsets, vec![0, 3, 5]);
        assert_eq!(&*b.src, &[0, 1, 3, 1, 2, 4]);
        assert_eq!(&*b.dst, &[1, 2, 4, 0, 1, 3]);
        assert!(b.graph_index.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn misaligned_weights_rejected() {
        let a = graph("a", 3, &[(0, 1), (1, 2)], 1);
        assert!(batch_graphs(&[&a], Some(&[vec![0.5]])).is_err());
        assert!(batch_graphs(&[&a], Some(&[])).is_err());
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let g = graph("a", 1, &[], 0);
        let adj = normalize_adjacency(&batch_graphs(&[&g], None).unwrap()).unwrap();
        assert_eq!(adj.to_dense(), vec![vec![1.0]]);
    }

    #[test]
    fn unit_edge_gives_halves() {
        let g = graph("a", 2, &[(0, 1)], 0);
        let adj = normalize_adjacency(&batch_graphs(&[&g], None).unwrap()).unwrap();
        for row in adj.to_dense() {
            for v in row {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weighted_normalization_matches_dense_oracle() {
        let mut r = rng::stream(1, "test", 0);
        for trial in 0..20 {
            let n = 2 + trial % 7;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if r.gen_bool(0.5) {
                        edges.push((i, j));
                    }
                }
            }
            let w: Vec<f64> = edges.iter().map(|_| r.gen::<f64>()).collect();
            let g = graph("r", n, &edges, 0);
            let b = batch_graphs(&[&g], Some(&[w.clone()])).unwrap();
            let got = normalize_adjacency(&b).unwrap().to_dense();

            // Dense oracle: A + I, degree, D^-1/2 M D^-1/2.
            let mut m = vec![vec![0.0; n]; n];
            for i in 0..n {
                m[i][i] = 1.0;
            }
            for (&(i, j), &wv) in edges.iter().zip(&w) {
                m[i][j] = wv;
                m[j][i] = wv;
            }
            let d: Vec<f64> = m.iter().map(|row| row.iter().sum()).collect();
            for i in 0..n {
                for j in 0..n {
                    let want = m[i][j] / (d[i].sqrt() * d[j].sqrt());
                    assert!((got[i][j] - want).abs() < 1e-12);
                    assert!((got[i][j] - got[j][i]).abs() == 0.0);
                    assert!((0.0..=1.0).contains(&got[i][j]));
                }
            }
        }
    }

    #[test]
    fn shuffling_is_seeded() {
        assert_eq!(batch_order(100, 7, 3, 2), batch_order(100, 7, 3, 2));
        assert_ne!(batch_order(100, 7, 3, 2), batch_order(100, 7, 3, 3));
        let flat: Vec<usize> = {
            let mut v: Vec<usize> = batch_order(100, 7, 3, 2).concat();
            v.sort();
            v
        };
        assert_eq!(flat, (0..100).collect::<Vec<_>>());
    }
}
