//! Split accuracy, mask ranking quality against planted edge tags, linear
//! probes of exported embeddings, and edge pruning for transfer runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Binder, ParamStore, Tape, Tensor};
use crate::datagen::Split;
use crate::disc::{cross_entropy, Mode, Model, TrainConfig};
use crate::error::{DiscError, Result};
use crate::graphdata::{EdgeTag, GraphInstance};
use crate::rng;

pub const STANDARD_PRUNE_LEVELS: [f64; 4] = [0.0, 0.2, 0.4, 0.6];

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(DiscError::invalid("split", "cannot score an empty split"));
    }
    if predictions.len() != labels.len() {
        return Err(DiscError::invalid(
            "predictions",
            format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let hit = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hit as f64 / labels.len() as f64)
}

/// Fraction of graphs whose predicted class equals `y`.
pub fn accuracy_of(model: &Model, graphs: &[GraphInstance]) -> Result<f64> {
    if graphs.is_empty() {
        return Err(DiscError::invalid("split", "cannot score an empty split"));
    }
    let labels: Vec<usize> = graphs.iter().map(|g| g.y).collect();
    accuracy(&model.predict(graphs)?, &labels)
}

fn check_auc_input(scores: &[f64], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(DiscError::invalid(
            "auc",
            "scores and labels differ in length",
        ));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(DiscError::invalid(
            "auc",
            "need at least one positive and one negative",
        ));
    }
    Ok((p, n))
}

/// ROC AUC via the rank-sum statistic, ties sharing their mean rank.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = check_auc_input(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum, so that midranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        rank_sum2 += twice_mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        i = j + 1;
    }
    let (p, n) = (p as u128, n as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// O(P * N) pairwise AUC: wins count 1, ties 1/2.
pub fn auc_pairwise(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = check_auc_input(scores, positive)?;
    let mut twice = 0u128;
    let pos = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(s, _)| *s);
    for si in pos {
        for sj in scores
            .iter()
            .zip(positive)
            .filter(|(_, &p)| !p)
            .map(|(s, _)| *s)
        {
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Causal-mask scores and tags of causal (positive) and bias (negative)
/// edges; mixed edges are dropped.
pub fn tagged_scores(
    graphs: &[GraphInstance],
    weights: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut pos = Vec::new();
    for (g, w) in graphs.iter().zip(weights) {
        let tags = g.edge_tag.as_ref().ok_or_else(|| {
            DiscError::invalid("edge_tag", format!("graph {} carries no edge tags", g.id))
        })?;
        for (&t, &c) in tags.iter().zip(w) {
            match t {
                EdgeTag::Causal => {
                    scores.push(c);
                    pos.push(true);
                }
                EdgeTag::Bias => {
                    scores.push(c);
                    pos.push(false);
                }
                EdgeTag::Mixed => {}
            }
        }
    }
    Ok((scores, pos))
}

pub fn mask_auc(model: &Model, graphs: &[GraphInstance]) -> Result<f64> {
    let w = model.edge_weights(graphs)?;
    let (s, p) = tagged_scores(graphs, &w)?;
    auc(&s, &p)
}

pub const PROBE_STEPS: usize = 1000;
pub const PROBE_TRAIN_FRACTION: f64 = 0.7;

/// Held-out accuracy of a multinomial logistic regression from `features`
/// rows to `targets`. Rows are split 70/30 by a seeded shuffle and
/// standardised with training statistics.
pub fn linear_probe(features: &Tensor, targets: &[usize], seed: u64) -> Result<f64> {
    if features.rows() != targets.len() {
        return Err(DiscError::invalid(
            "targets",
            format!("{} rows vs {} targets", features.rows(), targets.len()),
        ));
    }
    let k = targets.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; k];
        targets.iter().for_each(|&t| seen[t] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(DiscError::invalid(
            "targets",
            "probe needs at least two classes",
        ));
    }
    let mut idx: Vec<usize> = (0..targets.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "probe", 0));
    let cut = ((targets.len() as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    let (tr, te) = idx.split_at(cut.clamp(1, targets.len() - 1));
    let d = features.cols();

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in tr {
        for (m, v) in mean.iter_mut().zip(features.row_slice(i)) {
            *m += v / tr.len() as f64;
        }
    }
    for &i in tr {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(features.row_slice(i)) {
            *s += (v - m).powi(2) / tr.len() as f64;
        }
    }
    let sd: Vec<f64> = sd
        .iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let rows = |ids: &[usize]| -> Tensor {
        let data = ids
            .iter()
            .flat_map(|&i| {
                features
                    .row_slice(i)
                    .iter()
                    .zip(&mean)
                    .zip(&sd)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(ids.len(), d, data).expect("consistent probe rows")
    };
    let (xtr, xte) = (rows(tr), rows(te));
    let ytr: Arc<[usize]> = tr.iter().map(|&i| targets[i]).collect();

    let mut store = ParamStore::new();
    let w = store.add("probe.weight", Tensor::zeros(d, k));
    let b = store.add("probe.bias", Tensor::zeros(1, k));
    let adam = Adam::with_lr(0.05);
    for _ in 0..PROBE_STEPS {
        let t = Tape::new();
        let bind = Binder::new(&t, &store);
        let logits = t.add_row(
            t.matmul(t.constant(xtr.clone()), bind.param(w))?,
            bind.param(b),
        )?;
        let loss = t.mean(cross_entropy(&t, t.log_softmax_rows(logits)?, &ytr)?)?;
        let g = bind.collect(&t.backward(loss)?);
        drop(bind);
        adam.step(&mut store, &g)?;
    }
    let (wv, bv) = (&store.get(w).value, &store.get(b).value);
    let pred: Vec<usize> = (0..xte.rows())
        .map(|r| {
            let x = xte.row_slice(r);
            let score = |c: usize| {
                bv.data()[c]
                    + x.iter()
                        .enumerate()
                        .map(|(i, v)| v * wv.get(i, c))
                        .sum::<f64>()
            };
            (0..k).fold(0, |best, c| if score(c) > score(best) { c } else { best })
        })
        .collect();
    let labels: Vec<usize> = te.iter().map(|&i| targets[i]).collect();
    accuracy(&pred, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub z_c_to_y: f64,
    pub z_c_to_bias: f64,
    pub z_b_to_y: Option<f64>,
    pub z_b_to_bias: Option<f64>,
}

pub fn probe_report(model: &Model, graphs: &[GraphInstance], seed: u64) -> Result<ProbeReport> {
    let e = model.embed(graphs)?;
    let b = if e.z_bias.cols() > 0 {
        (
            Some(linear_probe(&e.z_bias, &e.labels, seed)?),
            Some(linear_probe(&e.z_bias, &e.bias_labels, seed)?),
        )
    } else {
        (None, None)
    };
    Ok(ProbeReport {
        z_c_to_y: linear_probe(&e.z_causal, &e.labels, seed)?,
        z_c_to_bias: linear_probe(&e.z_causal, &e.bias_labels, seed)?,
        z_b_to_y: b.0,
        z_b_to_bias: b.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub y: usize,
    pub bias_label: usize,
    pub z_c: Vec<f64>,
    pub z_b: Vec<f64>,
}

pub fn embedding_records(model: &Model, graphs: &[GraphInstance]) -> Result<Vec<EmbeddingRecord>> {
    let e = model.embed(graphs)?;
    Ok((0..graphs.len())
        .map(|i| EmbeddingRecord {
            id: e.ids[i].clone(),
            y: e.labels[i],
            bias_label: e.bias_labels[i],
            z_c: e.z_causal.row_slice(i).to_vec(),
            z_b: if e.z_bias.cols() > 0 {
                e.z_bias.row_slice(i).to_vec()
            } else {
                Vec::new()
            },
        })
        .collect())
}

fn write_lines<T: Serialize, W: Write>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON line per graph: id, labels, and both embeddings.
pub fn export_embeddings<W: Write>(model: &Model, graphs: &[GraphInstance], w: W) -> Result<usize> {
    let recs = embedding_records(model, graphs)?;
    write_lines(w, &recs)?;
    Ok(recs.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: String,
    pub edges: Vec<(usize, usize)>,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn export_masks<W: Write>(model: &Model, graphs: &[GraphInstance], w: W) -> Result<usize> {
    let weights = model.edge_weights(graphs)?;
    let recs: Vec<MaskRecord> = graphs
        .iter()
        .zip(weights)
        .map(|(g, c)| MaskRecord {
            id: g.id.clone(),
            edges: g.edges.clone(),
            b: c.iter().map(|v| 1.0 - v).collect(),
            c,
        })
        .collect();
    write_lines(w, &recs)?;
    Ok(recs.len())
}

/// Remove the `floor(fraction * |E|)` weakest edges (ties broken by lower
/// edge index first) and store the survivors' weights. Returns the pruned
/// graph and whether the last-edge fallback kicked in.
pub fn prune_graph(
    graph: &GraphInstance,
    weights: &[f64],
    fraction: f64,
) -> Result<(GraphInstance, bool)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DiscError::invalid(
            "fraction",
            format!("must lie in [0, 1], got {fraction}"),
        ));
    }
    if weights.len() != graph.num_edges() {
        return Err(DiscError::invalid(
            "weights",
            format!(
                "{} weights for {} edges of {}",
                weights.len(),
                graph.num_edges(),
                graph.id
            ),
        ));
    }
    let m = graph.num_edges();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(a.cmp(&b)));
    let mut drop_n = (fraction * m as f64 + 1e-9).floor() as usize;
    let fallback = m > 0 && drop_n >= m;
    if fallback {
        drop_n = m - 1;
    }
    let mut keep = vec![true; m];
    order[..drop_n].iter().for_each(|&e| keep[e] = false);
    let mut g = graph.clone();
    g.edges = (0..m)
        .filter(|&e| keep[e])
        .map(|e| graph.edges[e])
        .collect();
    g.edge_weight = Some((0..m).filter(|&e| keep[e]).map(|e| weights[e]).collect());
    g.edge_tag = graph
        .edge_tag
        .as_ref()
        .map(|t| (0..m).filter(|&e| keep[e]).map(|e| t[e]).collect());
    Ok((g, fallback))
}

pub fn prune_dataset(
    model: &Model,
    graphs: &[GraphInstance],
    fraction: f64,
) -> Result<Vec<GraphInstance>> {
    if !STANDARD_PRUNE_LEVELS
        .iter()
        .any(|&f| (f - fraction).abs() < 1e-12)
    {
        warn!(
            "pruning fraction {fraction} is outside the standard levels {STANDARD_PRUNE_LEVELS:?}"
        );
    }
    let weights = model.edge_weights(graphs)?;
    let mut out = Vec::with_capacity(graphs.len());
    for (g, w) in graphs.iter().zip(&weights) {
        let (p, fallback) = prune_graph(g, w, fraction)?;
        if fallback {
            warn!(
                "graph {}: pruning would remove every edge; kept the strongest one",
                g.id
            );
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub level: String,
    pub fraction: Option<f64>,
    pub unbiased_acc: f64,
}

/// Vanilla encoder trained on unit-weight original graphs, then on each
/// pruned-and-reweighted copy of the dataset; unbiased-test accuracy of each.
pub fn transfer_experiment(
    masker: &Model,
    train: &[GraphInstance],
    val: &[GraphInstance],
    test_unbiased: &[GraphInstance],
    fractions: &[f64],
    config: TrainConfig,
) -> Result<Vec<TransferRow>> {
    let cfg = TrainConfig {
        mode: Mode::Vanilla,
        ..config
    };
    let strip = |gs: &[GraphInstance]| -> Vec<GraphInstance> {
        gs.iter()
            .map(|g| GraphInstance {
                edge_weight: None,
                ..g.clone()
            })
            .collect()
    };
    let mut rows = Vec::new();
    let (m, _) = crate::disc::train(cfg, &strip(train), &strip(val))?;
    rows.push(TransferRow {
        level: "original".into(),
        fraction: None,
        unbiased_acc: accuracy_of(&m, &strip(test_unbiased))?,
    });
    for &f in fractions {
        let tr = prune_dataset(masker, train, f)?;
        let va = prune_dataset(masker, val, f)?;
        let te = prune_dataset(masker, test_unbiased, f)?;
        let (m, _) = crate::disc::train(cfg, &tr, &va)?;
        rows.push(TransferRow {
            level: format!("prune{:.0}", f * 100.0),
            fraction: Some(f),
            unbiased_acc: accuracy_of(&m, &te)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: BTreeMap<Split, f64>,
    pub mask_auc: Option<f64>,
    pub probes: Option<ProbeReport>,
    pub config_hash: String,
    pub epoch: usize,
}

/// Every graph is tagged and both tags occur, so the AUC is defined.
/// Heavily pruned data can lose all bias edges.
fn has_both_tags(graphs: &[GraphInstance]) -> bool {
    let tags = || graphs.iter().flat_map(|g| g.edge_tag.iter().flatten());
    graphs.iter().all(|g| g.edge_tag.is_some())
        && tags().any(|t| *t == EdgeTag::Causal)
        && tags().any(|t| *t == EdgeTag::Bias)
}

/// Accuracy on every non-empty split; mask AUC and probes on the unbiased
/// test split when it is present (mask AUC only for two-branch models).
pub fn evaluate(
    model: &Model,
    splits: &BTreeMap<Split, Vec<GraphInstance>>,
    config_hash: &str,
    epoch: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut acc = BTreeMap::new();
    for (&s, g) in splits {
        if !g.is_empty() {
            acc.insert(s, accuracy_of(model, g)?);
        }
    }
    let unbiased = splits.get(&Split::TestUnbiased).filter(|g| !g.is_empty());
    let mask = match (model.arch.mode, unbiased) {
        (Mode::Disc, Some(g)) if has_both_tags(g) => Some(mask_auc(model, g)?),
        _ => None,
    };
    let probes = match unbiased {
        Some(g) if g.len() >= 4 => Some(probe_report(model, g, seed)?),
        _ => None,
    };
    Ok(EvalReport {
        accuracy: acc,
        mask_auc: mask,
        probes,
        config_hash: config_hash.to_string(),
        epoch,
    })
}
