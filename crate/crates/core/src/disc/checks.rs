//! Gradient self-tests: per-operation finite differences, the full training
//! objective on a toy graph, and the GCE/CE gradient identity.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use super::loss::{cross_entropy, disentangle_loss, gce_loss, generation_loss, total_loss, Heads};
use super::model::{Architecture, Mode, Model, Net};
use super::swap::apply_swap;
use crate::autodiff::{
    finite_difference_check_with, parameter_gradient_check_with, relative_error, Binder, OpKind,
    ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::error::{DiscError, Result};
use crate::gnn::{EncoderConfig, EncoderKind};
use crate::graphdata::{batch_graphs, BatchedGraph, GraphInstance, FEATURE_DIM};
use crate::rng::{self, StreamRng};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

fn uniform(r: &mut StreamRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Uniform values with magnitude in `[gap, 1)`, random sign; keeps inputs
/// away from kinks at zero.
fn away_from_zero(r: &mut StreamRng, rows: usize, cols: usize, gap: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = r.gen_range(gap..1.0);
                if r.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Random linear functional of `out`, so that no op is checked through a
/// loss whose gradient vanishes identically.
fn project(t: &Tape, out: Var, seed: u64) -> Result<Var> {
    let [r, c] = t.shape(out);
    let w = t.constant(uniform(
        &mut rng::stream(seed, "gradcheck/projection", 0),
        r,
        c,
        -1.0,
        1.0,
    ));
    t.sum(t.mul(out, w)?)
}

fn op_check(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut r = rng::stream(seed, "gradcheck/op", kind as u64);
    let idx = |v: &[usize]| -> Arc<[usize]> { v.to_vec().into() };
    macro_rules! check {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            finite_difference_check_with(
                |$t: &Tape, $v: &[Var]| -> Result<Var> {
                    let out = $body;
                    project($t, out, seed)
                },
                &$inputs,
                FD_EPS,
                fault,
            )
        };
    }
    match kind {
        OpKind::Leaf => check!([uniform(&mut r, 3, 2, -1.0, 1.0)], |t, v| v[0]),
        OpKind::Add => check!(
            [
                uniform(&mut r, 3, 2, -1.0, 1.0),
                uniform(&mut r, 3, 2, -1.0, 1.0)
            ],
            |t, v| t.add(v[0], v[1])?
        ),
        OpKind::Sub => check!(
            [
                uniform(&mut r, 3, 2, -1.0, 1.0),
                uniform(&mut r, 3, 2, -1.0, 1.0)
            ],
            |t, v| t.sub(v[0], v[1])?
        ),
        OpKind::Mul => check!(
            [
                uniform(&mut r, 3, 2, -1.0, 1.0),
                uniform(&mut r, 3, 2, -1.0, 1.0)
            ],
            |t, v| t.mul(v[0], v[1])?
        ),
        OpKind::AddRow => check!(
            [
                uniform(&mut r, 4, 3, -1.0, 1.0),
                uniform(&mut r, 1, 3, -1.0, 1.0)
            ],
            |t, v| t.add_row(v[0], v[1])?
        ),
        OpKind::MulCol => check!(
            [
                uniform(&mut r, 4, 3, -1.0, 1.0),
                uniform(&mut r, 4, 1, -1.0, 1.0)
            ],
            |t, v| t.mul_col(v[0], v[1])?
        ),
        OpKind::Affine => check!([uniform(&mut r, 3, 3, -1.0, 1.0)], |t, v| t
            .affine(v[0], -1.7, 0.4)?),
        OpKind::Pow => check!([uniform(&mut r, 3, 2, 0.2, 1.5)], |t, v| t
            .pow(v[0], 0.7)?),
        OpKind::MatMul => check!(
            [
                uniform(&mut r, 3, 4, -1.0, 1.0),
                uniform(&mut r, 4, 2, -1.0, 1.0)
            ],
            |t, v| t.matmul(v[0], v[1])?
        ),
        OpKind::ConcatCols => check!(
            [
                uniform(&mut r, 3, 2, -1.0, 1.0),
                uniform(&mut r, 3, 1, -1.0, 1.0)
            ],
            |t, v| t.concat_cols(v[0], v[1])?
        ),
        OpKind::ConcatRows => check!(
            [
                uniform(&mut r, 2, 3, -1.0, 1.0),
                uniform(&mut r, 1, 3, -1.0, 1.0)
            ],
            |t, v| t.concat_rows(v[0], v[1])?
        ),
        OpKind::Sigmoid => check!([uniform(&mut r, 3, 3, -3.0, 3.0)], |t, v| t
            .sigmoid(v[0])?),
        OpKind::Relu => check!([away_from_zero(&mut r, 3, 3, 0.05)], |t, v| t.relu(v[0])?),
        OpKind::Log => check!([uniform(&mut r, 3, 2, 0.2, 2.0)], |t, v| t.log(v[0])?),
        OpKind::Clamp => check!(
            [Tensor::row(vec![-0.9, -0.3, 0.0, 0.2, 0.45, 0.8])],
            |t, v| t.clamp(v[0], -0.5, 0.5)?
        ),
        OpKind::SoftmaxRows => check!([uniform(&mut r, 3, 4, -2.0, 2.0)], |t, v| t
            .softmax_rows(v[0])?),
        OpKind::LogSoftmaxRows => check!([uniform(&mut r, 3, 4, -2.0, 2.0)], |t, v| t
            .log_softmax_rows(v[0])?),
        OpKind::Mean => check!([uniform(&mut r, 3, 2, -1.0, 1.0)], |t, v| t.mean(v[0])?),
        OpKind::Sum => check!([uniform(&mut r, 3, 2, -1.0, 1.0)], |t, v| t.sum(v[0])?),
        OpKind::SumCols => check!([uniform(&mut r, 3, 4, -1.0, 1.0)], |t, v| t
            .sum_cols(v[0])?),
        OpKind::SegmentSum => check!([uniform(&mut r, 5, 2, -1.0, 1.0)], |t, v| t.segment_sum(
            v[0],
            idx(&[2, 0, 2, 1, 0]),
            4
        )?),
        OpKind::GatherRows => check!([uniform(&mut r, 3, 2, -1.0, 1.0)], |t, v| t
            .gather_rows(v[0], idx(&[2, 0, 2, 1]))?),
        OpKind::PickCols => check!([uniform(&mut r, 3, 4, -1.0, 1.0)], |t, v| t
            .pick_cols(v[0], idx(&[3, 0, 1]))?),
        OpKind::Propagate => check!(
            [
                uniform(&mut r, 4, 3, -1.0, 1.0),
                uniform(&mut r, 5, 1, -1.0, 1.0)
            ],
            |t, v| t.propagate(v[0], v[1], idx(&[0, 1, 3, 3, 2]), idx(&[1, 0, 2, 0, 2]))?
        ),
        OpKind::Detach => check!([uniform(&mut r, 3, 2, -1.0, 1.0)], |t, v| t
            .mul(v[0], t.detach(v[0]))?),
    }
}

/// Two 4-node graphs sharing one topology, with distinct features and labels.
pub fn toy_batch() -> BatchedGraph {
    let edges = vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)];
    let mut r = rng::stream(0, "gradcheck/toy", 0);
    let graphs: Vec<GraphInstance> = (0..2)
        .map(|g| GraphInstance {
            id: format!("toy-{g}"),
            num_nodes: 4,
            x: (0..4 * FEATURE_DIM)
                .map(|_| r.gen_range(0.0..1.0))
                .collect(),
            edges: edges.clone(),
            y: g,
            bias_label: 1 - g,
            edge_tag: None,
            edge_weight: None,
            biased: None,
        })
        .collect();
    batch_graphs(&graphs.iter().collect::<Vec<_>>(), None).expect("toy graphs are valid")
}

pub fn toy_architecture(kind: EncoderKind) -> Architecture {
    Architecture {
        mode: Mode::Disc,
        encoder: EncoderConfig {
            kind,
            layers: 2,
            hidden: 3,
        },
        masker_hidden: 3,
        num_classes: 3,
    }
}

/// A model whose biases are non-zero too, so every parameter is exercised.
pub fn random_model(arch: Architecture, seed: u64) -> Result<Model> {
    let mut m = Model::init(arch, seed)?;
    let mut r = rng::stream(seed, "gradcheck/params", 0);
    for p in m.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
    Ok(m)
}

fn heads(model: &Model) -> Result<Heads<'_>> {
    match &model.net {
        Net::Disc(n) => Ok(Heads {
            causal: &n.causal_clf,
            bias: &n.bias_clf,
        }),
        Net::Vanilla(_) => Err(DiscError::invalid("mode", "needs a two-branch model")),
    }
}

/// `L_D + lambda_g * L_G` with a fixed transposition swap.
pub fn full_objective(
    model: &Model,
    bind: &Binder,
    batch: &BatchedGraph,
    q: f64,
    lambda_g: f64,
) -> Result<Var> {
    let t = bind.tape;
    let h = heads(model)?;
    let f = model.disc_forward(bind, batch)?;
    let y: Arc<[usize]> = batch.labels.clone().into();
    let d = disentangle_loss(bind, h, f.z_causal, f.z_bias, &y, q)?;
    let perm: Vec<usize> = (0..batch.num_graphs()).rev().collect();
    let s = apply_swap(t, f.z_bias, &batch.labels, perm)?;
    let g = generation_loss(bind, h, f.z_causal, s.z_b_hat, &y, &s.y_hat, &d.weights, q)?;
    total_loss(t, d.terms.loss, Some(g.loss), lambda_g, 1, 0)
}

fn full_loss_check(kind: EncoderKind, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let model = random_model(toy_architecture(kind), seed)?;
    let batch = toy_batch();
    parameter_gradient_check_with(
        &model.store,
        |b| full_objective(&model, b, &batch, 0.7, 10.0),
        FD_EPS,
        fault,
    )
}

/// Parameters of the bias encoder and bias classifier.
pub fn bias_branch_params(store: &ParamStore) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with("bias.") || p.name.starts_with("bias_clf."))
        .map(|(id, _)| id)
        .collect()
}

pub fn causal_encoder_params(store: &ParamStore) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with("causal."))
        .map(|(id, _)| id)
        .collect()
}

pub fn masker_params(store: &ParamStore) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with("masker."))
        .map(|(id, _)| id)
        .collect()
}

/// Worst relative error of `dGCE/dθ_b = p_y^q * dCE/dθ_b` on one graph.
pub fn gce_gradient_identity(
    model: &Model,
    graph: &BatchedGraph,
    q: f64,
    fault: Option<OpKind>,
) -> Result<f64> {
    if graph.num_graphs() != 1 {
        return Err(DiscError::invalid(
            "batch",
            "identity is stated for single-graph batches",
        ));
    }
    let t = Tape::new();
    t.inject_fault(fault);
    let bind = Binder::new(&t, &model.store);
    let h = heads(model)?;
    let f = model.disc_forward(&bind, graph)?;
    let y: Arc<[usize]> = graph.labels.clone().into();
    let (pb, lb) = h
        .bias
        .classify_with_log(&bind, t.concat_cols(t.detach(f.z_causal), f.z_bias)?)?;
    let py = t.value(pb).get(0, y[0]);
    let g_gce = bind.collect(&t.backward(gce_loss(&t, pb, &y, q)?)?);
    let g_ce = bind.collect(&t.backward(t.mean(cross_entropy(&t, lb, &y)?)?)?);
    let scale = py.max(crate::autodiff::LOG_FLOOR).powf(q);
    let mut worst = 0.0f64;
    for id in bias_branch_params(&model.store) {
        for (a, b) in g_gce[id.0].data().iter().zip(g_ce[id.0].data()) {
            worst = worst.max(relative_error(*a, scale * b));
        }
    }
    Ok(worst)
}

/// Single toy graph for the identity check.
pub fn toy_single() -> BatchedGraph {
    let b = toy_batch();
    let g = GraphInstance {
        id: "toy-single".into(),
        num_nodes: 4,
        x: b.features.data()[..4 * FEATURE_DIM].to_vec(),
        edges: b.edges[..b.edge_offsets[1]].to_vec(),
        y: 2,
        bias_label: 0,
        edge_tag: None,
        edge_weight: None,
        biased: None,
    };
    batch_graphs(&[&g], None).expect("toy graph is valid")
}

/// Worst identity error over `draws` random (parameters, q) pairs.
pub fn identity_draws(draws: usize, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let graph = toy_single();
    let mut r = rng::stream(seed, "gradcheck/q", 0);
    let mut worst = 0.0f64;
    for d in 0..draws {
        let q = r.gen_range(0.05..=1.0);
        let model = random_model(
            toy_architecture(EncoderKind::Gcn),
            seed.wrapping_add(d as u64),
        )?;
        worst = worst.max(gce_gradient_identity(&model, &graph, q, fault)?);
    }
    Ok(worst)
}

/// Every check of the release gate. `fault` corrupts one backward rule.
pub fn gradient_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        out.push(CheckResult {
            name: format!("op/{}", kind.name()),
            worst: op_check(kind, seed, fault)?,
            threshold: FD_TOLERANCE,
        });
    }
    for kind in [EncoderKind::Gcn, EncoderKind::Gin] {
        out.push(CheckResult {
            name: format!("objective/{kind:?}").to_lowercase(),
            worst: full_loss_check(kind, seed, fault)?,
            threshold: FD_TOLERANCE,
        });
    }
    out.push(CheckResult {
        name: "gce_identity".into(),
        worst: identity_draws(20, seed, fault)?,
        threshold: IDENTITY_TOLERANCE,
    });
    Ok(out)
}
