use serde::{Deserialize, Serialize};

use super::masker::{EdgeScores, MaskGenerator};
use crate::autodiff::{Binder, ParamStore, Tape, Tensor, Var};
use crate::error::{DiscError, Result};
use crate::gnn::{Encoder, EncoderConfig, LinearClassifier, VanillaModel};
use crate::graphdata::{batch_graphs, BatchedGraph, GraphInstance};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Disc,
    Vanilla,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "disc" => Ok(Mode::Disc),
            "vanilla" => Ok(Mode::Vanilla),
            other => Err(format!("unknown mode `{other}` (expected disc or vanilla)")),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub mode: Mode,
    pub encoder: EncoderConfig,
    pub masker_hidden: usize,
    pub num_classes: usize,
}

/// Masker, causal/bias encoders and their classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscNet {
    pub masker: MaskGenerator,
    pub causal: Encoder,
    pub bias: Encoder,
    pub causal_clf: LinearClassifier,
    pub bias_clf: LinearClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Net {
    Disc(DiscNet),
    Vanilla(VanillaModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
    pub net: Net,
}

/// Forward results of the two-branch network on one batch.
pub struct DiscForward {
    pub scores: EdgeScores,
    pub z_causal: Var,
    pub z_bias: Var,
}

/// Per-graph embeddings, read back from the tape.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub bias_labels: Vec<usize>,
    pub z_causal: Tensor,
    /// Empty (zero columns) for vanilla models.
    pub z_bias: Tensor,
}

pub const EVAL_BATCH: usize = 256;

impl Model {
    /// Glorot-initialised parameters drawn from the `init` stream of `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.num_classes < 2 {
            return Err(DiscError::invalid("num_classes", "need at least 2 classes"));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init", 0);
        let net = match arch.mode {
            Mode::Vanilla => Net::Vanilla(VanillaModel::new(
                &mut store,
                arch.encoder,
                arch.num_classes,
                &mut r,
            )?),
            Mode::Disc => {
                if arch.masker_hidden == 0 {
                    return Err(DiscError::invalid("masker_hidden", "must be positive"));
                }
                let masker = MaskGenerator::new(&mut store, arch.masker_hidden, &mut r);
                let causal = Encoder::new(&mut store, "causal", arch.encoder, &mut r)?;
                let bias = Encoder::new(&mut store, "bias", arch.encoder, &mut r)?;
                let h = arch.encoder.hidden;
                let causal_clf = LinearClassifier::new(
                    &mut store,
                    "causal_clf",
                    2 * h,
                    arch.num_classes,
                    &mut r,
                );
                let bias_clf =
                    LinearClassifier::new(&mut store, "bias_clf", 2 * h, arch.num_classes, &mut r);
                Net::Disc(DiscNet {
                    masker,
                    causal,
                    bias,
                    causal_clf,
                    bias_clf,
                })
            }
        };
        Ok(Model { arch, store, net })
    }

    pub fn disc(&self) -> Option<&DiscNet> {
        match &self.net {
            Net::Disc(d) => Some(d),
            Net::Vanilla(_) => None,
        }
    }

    /// Masks, split, and both encodings.
    pub fn disc_forward(&self, bind: &Binder, batch: &BatchedGraph) -> Result<DiscForward> {
        let net = self
            .disc()
            .ok_or_else(|| DiscError::invalid("mode", "operation needs a two-branch model"))?;
        let scores = net.masker.edge_scores(bind, batch)?;
        let z_causal = net.causal.encode(bind, batch, Some(scores.causal))?;
        let z_bias = net.bias.encode(bind, batch, Some(scores.bias))?;
        Ok(DiscForward {
            scores,
            z_causal,
            z_bias,
        })
    }

    /// Class probabilities used for prediction (causal classifier on
    /// `[z_c; z_b]`, or the single classifier of a vanilla model).
    pub fn predict_probs(&self, bind: &Binder, batch: &BatchedGraph) -> Result<Var> {
        let t = bind.tape;
        match &self.net {
            Net::Vanilla(v) => {
                let z = v.encoder.encode(bind, batch, None)?;
                v.classifier.classify(bind, z)
            }
            Net::Disc(net) => {
                let f = self.disc_forward(bind, batch)?;
                net.causal_clf
                    .classify(bind, t.concat_cols(f.z_causal, f.z_bias)?)
            }
        }
    }

    pub fn predict(&self, graphs: &[GraphInstance]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(EVAL_BATCH) {
            let batch = batch_graphs(&chunk.iter().collect::<Vec<_>>(), None)?;
            let tape = Tape::new();
            let bind = Binder::new(&tape, &self.store);
            let p = self.predict_probs(&bind, &batch)?;
            out.extend(tape.value(p).argmax_rows());
        }
        Ok(out)
    }

    pub fn embed(&self, graphs: &[GraphInstance]) -> Result<Embeddings> {
        let mut zc: Vec<f64> = Vec::new();
        let mut zb: Vec<f64> = Vec::new();
        let (mut wc, mut wb) = (0, 0);
        for chunk in graphs.chunks(EVAL_BATCH) {
            let batch = batch_graphs(&chunk.iter().collect::<Vec<_>>(), None)?;
            let tape = Tape::new();
            let bind = Binder::new(&tape, &self.store);
            match &self.net {
                Net::Vanilla(v) => {
                    let z = v.encoder.encode(&bind, &batch, None)?;
                    wc = tape.shape(z)[1];
                    zc.extend_from_slice(tape.value(z).data());
                }
                Net::Disc(_) => {
                    let f = self.disc_forward(&bind, &batch)?;
                    wc = tape.shape(f.z_causal)[1];
                    wb = tape.shape(f.z_bias)[1];
                    zc.extend_from_slice(tape.value(f.z_causal).data());
                    zb.extend_from_slice(tape.value(f.z_bias).data());
                }
            }
        }
        Ok(Embeddings {
            ids: graphs.iter().map(|g| g.id.clone()).collect(),
            labels: graphs.iter().map(|g| g.y).collect(),
            bias_labels: graphs.iter().map(|g| g.bias_label).collect(),
            z_causal: Tensor::new(graphs.len(), wc, zc)?,
            z_bias: Tensor::new(if wb == 0 { 0 } else { graphs.len() }, wb, zb)?,
        })
    }

    /// Causal mask weight `c` of every edge, per graph.
    pub fn edge_weights(&self, graphs: &[GraphInstance]) -> Result<Vec<Vec<f64>>> {
        let net = self
            .disc()
            .ok_or_else(|| DiscError::invalid("mode", "vanilla models have no edge masker"))?;
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(EVAL_BATCH) {
            let batch = batch_graphs(&chunk.iter().collect::<Vec<_>>(), None)?;
            let tape = Tape::new();
            let bind = Binder::new(&tape, &self.store);
            let s = net.masker.edge_scores(&bind, &batch)?;
            let c = tape.value(s.causal);
            for w in batch.edge_offsets.windows(2) {
                out.push(c.data()[w[0]..w[1]].to_vec());
            }
        }
        Ok(out)
    }
}
