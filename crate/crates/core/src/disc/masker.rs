use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::gnn::Dense;
use crate::graphdata::{BatchedGraph, FEATURE_DIM};
use crate::rng::StreamRng;

/// Scores are clamped to this logit range so that `c` stays strictly
/// inside `(0, 1)`.
pub const LOGIT_BOUND: f64 = 30.0;

/// Two-layer perceptron over concatenated endpoint features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGenerator {
    pub hidden: Dense,
    pub output: Dense,
}

/// Causal weight `c` and bias weight `b = 1 - c`, one row per undirected edge.
#[derive(Clone, Copy, Debug)]
pub struct EdgeScores {
    pub causal: Var,
    pub bias: Var,
}

impl MaskGenerator {
    pub fn new(store: &mut ParamStore, hidden: usize, rng: &mut StreamRng) -> Self {
        MaskGenerator {
            hidden: Dense::new(store, "masker.hidden", 2 * FEATURE_DIM, hidden, rng),
            output: Dense::new(store, "masker.output", hidden, 1, rng),
        }
    }

    fn mlp(&self, bind: &Binder, pairs: Var) -> Result<Var> {
        let t = bind.tape;
        let h = t.sigmoid(self.hidden.forward(bind, pairs)?)?;
        self.output.forward(bind, h)
    }

    /// Edge logits averaged over both endpoint orders, so the mask is
    /// symmetric in `(i, j)`.
    pub fn edge_logits(&self, bind: &Binder, batch: &BatchedGraph) -> Result<Var> {
        let t = bind.tape;
        let x = t.constant(batch.features.clone());
        let pairs = t.concat_cols(
            t.gather_rows(x, batch.src.clone())?,
            t.gather_rows(x, batch.dst.clone())?,
        )?;
        let directed = self.mlp(bind, pairs)?;
        let summed = t.segment_sum(directed, batch.directed_edge.clone(), batch.num_edges())?;
        t.affine(summed, 0.5, 0.0)
    }

    pub fn edge_scores(&self, bind: &Binder, batch: &BatchedGraph) -> Result<EdgeScores> {
        let t = bind.tape;
        let alpha = t.clamp(self.edge_logits(bind, batch)?, -LOGIT_BOUND, LOGIT_BOUND)?;
        let causal = t.sigmoid(alpha)?;
        let bias = t.affine(causal, -1.0, 1.0)?;
        Ok(EdgeScores { causal, bias })
    }
}

/// Edge weights of the causal and bias subgraphs over the same topology.
pub fn split_graph(
    batch: &BatchedGraph,
    scores: EdgeScores,
) -> (SubgraphView<'_>, SubgraphView<'_>) {
    (
        SubgraphView {
            batch,
            weights: scores.causal,
        },
        SubgraphView {
            batch,
            weights: scores.bias,
        },
    )
}

/// A batch with edge weights replaced by a mask column.
#[derive(Clone, Copy)]
pub struct SubgraphView<'a> {
    pub batch: &'a BatchedGraph,
    pub weights: Var,
}

impl SubgraphView<'_> {
    /// Weighted adjacency (no self-loops) as a dense matrix.
    pub fn dense_adjacency(&self, bind: &Binder) -> Vec<Vec<f64>> {
        let n = self.batch.num_nodes();
        let w = bind.tape.value(self.weights);
        let mut m = vec![vec![0.0; n]; n];
        for (e, &(i, j)) in self.batch.edges.iter().enumerate() {
            m[i][j] += w.data()[e];
            m[j][i] += w.data()[e];
        }
        m
    }
}

/// Plain forward evaluation of the masker on one endpoint pair, independent
/// of the tape.
pub fn reference_score(store: &ParamStore, masker: &MaskGenerator, xi: &[f64], xj: &[f64]) -> f64 {
    let run = |a: &[f64], b: &[f64]| -> f64 {
        let input: Vec<f64> = a.iter().chain(b).copied().collect();
        let w1: &Tensor = &store.get(masker.hidden.weight).value;
        let b1 = &store.get(masker.hidden.bias).value;
        let w2 = &store.get(masker.output.weight).value;
        let b2 = &store.get(masker.output.bias).value;
        let mut out = b2.data()[0];
        for h in 0..w1.cols() {
            let mut s = b1.data()[h];
            for (k, &v) in input.iter().enumerate() {
                s += v * w1.get(k, h);
            }
            out += crate::autodiff::sigmoid_scalar(s) * w2.get(h, 0);
        }
        out
    };
    let alpha = 0.5 * (run(xi, xj) + run(xj, xi));
    crate::autodiff::sigmoid_scalar(alpha.clamp(-LOGIT_BOUND, LOGIT_BOUND))
}
