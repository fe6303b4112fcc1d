//! Graph encoders (GCN, GIN0) with mean readout, and linear classifiers.
//!
//! Edge weights enter both encoders as a differentiable `U x 1` column over
//! undirected edges, so masks produced upstream receive gradients through
//! message passing and, for GCN, through degree normalisation.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamId, ParamStore, Tensor, Var};
use crate::error::{DiscError, Result};
use crate::graphdata::{BatchedGraph, FEATURE_DIM};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gcn,
    Gin,
}

impl EncoderKind {
    /// Hidden width used by the reference benchmark architectures.
    pub fn paper_hidden(self) -> usize {
        match self {
            EncoderKind::Gcn => 146,
            EncoderKind::Gin => 110,
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gcn" => Ok(EncoderKind::Gcn),
            "gin" => Ok(EncoderKind::Gin),
            other => Err(format!("unknown encoder `{other}` (expected gcn or gin)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Gcn,
            layers: 4,
            hidden: 32,
        }
    }
}

/// Glorot-uniform matrix, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut StreamRng,
    ) -> Self {
        Dense {
            weight: store.add(format!("{name}.weight"), glorot(fan_in, fan_out, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, bind: &Binder, x: Var) -> Result<Var> {
        let t = bind.tape;
        t.add_row(t.matmul(x, bind.param(self.weight))?, bind.param(self.bias))
    }
}

/// Shared per-batch index tensors and the edge-weight column.
struct Propagation {
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    /// Weight of each directed edge, `2U x 1`.
    directed_weight: Var,
    num_nodes: usize,
}

impl Propagation {
    fn new(bind: &Binder, batch: &BatchedGraph, edge_weight: Option<Var>) -> Result<Self> {
        let t = bind.tape;
        let w = match edge_weight {
            Some(w) => {
                if t.shape(w) != [batch.num_edges(), 1] {
                    return Err(DiscError::Shape {
                        op: "encode",
                        detail: format!(
                            "edge weights {:?} for {} edges",
                            t.shape(w),
                            batch.num_edges()
                        ),
                    });
                }
                w
            }
            None => t.constant(Tensor::column(batch.edge_weights.clone())),
        };
        Ok(Propagation {
            src: batch.src.clone(),
            dst: batch.dst.clone(),
            directed_weight: t.gather_rows(w, batch.directed_edge.clone())?,
            num_nodes: batch.num_nodes(),
        })
    }

    /// `sum_{u -> v} coef_uv * h_u` for every node `v`.
    fn aggregate(&self, bind: &Binder, h: Var, coef: Var) -> Result<Var> {
        bind.tape
            .propagate(h, coef, self.src.clone(), self.dst.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnEncoder {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinEncoder {
    /// Two-layer perceptron per message-passing layer.
    pub layers: Vec<(Dense, Dense)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Gcn(GcnEncoder),
    Gin(GinEncoder),
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(DiscError::invalid(
                "encoder",
                "need at least one layer of non-zero width",
            ));
        }
        let width = |l: usize| if l == 0 { FEATURE_DIM } else { cfg.hidden };
        Ok(match cfg.kind {
            EncoderKind::Gcn => Encoder::Gcn(GcnEncoder {
                layers: (0..cfg.layers)
                    .map(|l| {
                        Dense::new(store, &format!("{name}.gcn{l}"), width(l), cfg.hidden, rng)
                    })
                    .collect(),
            }),
            EncoderKind::Gin => Encoder::Gin(GinEncoder {
                layers: (0..cfg.layers)
                    .map(|l| {
                        (
                            Dense::new(
                                store,
                                &format!("{name}.gin{l}.mlp0"),
                                width(l),
                                cfg.hidden,
                                rng,
                            ),
                            Dense::new(
                                store,
                                &format!("{name}.gin{l}.mlp1"),
                                cfg.hidden,
                                cfg.hidden,
                                rng,
                            ),
                        )
                    })
                    .collect(),
            }),
        })
    }

    /// Node embeddings after all message-passing layers.
    pub fn node_embeddings(
        &self,
        bind: &Binder,
        batch: &BatchedGraph,
        edge_weight: Option<Var>,
    ) -> Result<Var> {
        let t = bind.tape;
        let prop = Propagation::new(bind, batch, edge_weight)?;
        let mut h = t.constant(batch.features.clone());
        match self {
            Encoder::Gcn(enc) => {
                // d_i = 1 + sum_j w_ij; coefficients w_ij / sqrt(d_i d_j), 1 / d_i.
                let deg = t.segment_sum(prop.directed_weight, prop.dst.clone(), prop.num_nodes)?;
                let deg = t.affine(deg, 1.0, 1.0)?;
                let inv_sqrt = t.pow(deg, -0.5)?;
                let self_coef = t.pow(deg, -1.0)?;
                let coef = t.mul(
                    t.mul(
                        prop.directed_weight,
                        t.gather_rows(inv_sqrt, prop.src.clone())?,
                    )?,
                    t.gather_rows(inv_sqrt, prop.dst.clone())?,
                )?;
                for layer in &enc.layers {
                    let hw = t.matmul(h, bind.param(layer.weight))?;
                    let agg = t.add(prop.aggregate(bind, hw, coef)?, t.mul_col(hw, self_coef)?)?;
                    h = t.relu(t.add_row(agg, bind.param(layer.bias))?)?;
                }
            }
            Encoder::Gin(enc) => {
                for (mlp0, mlp1) in &enc.layers {
                    let agg = t.add(h, prop.aggregate(bind, h, prop.directed_weight)?)?;
                    let hidden = t.relu(mlp0.forward(bind, agg)?)?;
                    h = t.relu(mlp1.forward(bind, hidden)?)?;
                }
            }
        }
        Ok(h)
    }

    /// Mean-readout graph embeddings, `num_graphs x hidden`.
    pub fn encode(
        &self,
        bind: &Binder,
        batch: &BatchedGraph,
        edge_weight: Option<Var>,
    ) -> Result<Var> {
        let h = self.node_embeddings(bind, batch, edge_weight)?;
        mean_readout(bind, batch, h)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        let last = match self {
            Encoder::Gcn(e) => e.layers.last().map(|d| d.bias),
            Encoder::Gin(e) => e.layers.last().map(|d| d.1.bias),
        };
        last.map_or(0, |b| store.get(b).value.cols())
    }
}

pub fn mean_readout(bind: &Binder, batch: &BatchedGraph, h: Var) -> Result<Var> {
    let t = bind.tape;
    let inv: Vec<f64> = batch
        .nodes_per_graph()
        .iter()
        .map(|&c| 1.0 / c.max(1) as f64)
        .collect();
    let summed = t.segment_sum(h, batch.graph_index.clone(), batch.num_graphs())?;
    t.mul_col(summed, t.constant(Tensor::column(inv)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub dense: Dense,
    pub in_dim: usize,
    pub classes: usize,
}

impl LinearClassifier {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        classes: usize,
        rng: &mut StreamRng,
    ) -> Self {
        LinearClassifier {
            dense: Dense::new(store, name, in_dim, classes, rng),
            in_dim,
            classes,
        }
    }

    pub fn logits(&self, bind: &Binder, z: Var) -> Result<Var> {
        let width = bind.tape.shape(z)[1];
        if width != self.in_dim {
            return Err(DiscError::Shape {
                op: "classify",
                detail: format!(
                    "embedding width {width}, classifier expects {}",
                    self.in_dim
                ),
            });
        }
        self.dense.forward(bind, z)
    }

    /// Row-wise softmax of `W z + b`.
    pub fn classify(&self, bind: &Binder, z: Var) -> Result<Var> {
        bind.tape.softmax_rows(self.logits(bind, z)?)
    }

    /// Probabilities and log-probabilities from one shared logit node.
    pub fn classify_with_log(&self, bind: &Binder, z: Var) -> Result<(Var, Var)> {
        let logits = self.logits(bind, z)?;
        Ok((
            bind.tape.softmax_rows(logits)?,
            bind.tape.log_softmax_rows(logits)?,
        ))
    }
}

/// Single-encoder baseline trained with plain cross entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaModel {
    pub encoder: Encoder,
    pub classifier: LinearClassifier,
}

impl VanillaModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: EncoderConfig,
        classes: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, "encoder", cfg, rng)?;
        let classifier = LinearClassifier::new(store, "classifier", cfg.hidden, classes, rng);
        Ok(VanillaModel {
            encoder,
            classifier,
        })
    }
}
