use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use super::loss::{
    cross_entropy, disentangle_loss, generation_active, generation_loss, total_loss, Heads,
};
use super::model::{Architecture, Mode, Model, Net};
use super::swap::{counterfactual_swap, swap_rng};
use crate::autodiff::{Adam, Binder, Tape, Var};
use crate::error::{DiscError, Result};
use crate::gnn::EncoderConfig;
use crate::graphdata::{batch_graphs, batch_order, GraphInstance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub q: f64,
    pub lambda_g: f64,
    pub epochs: usize,
    pub t_gen: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub encoder: EncoderConfig,
    pub masker_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Disc,
            q: 0.7,
            lambda_g: 10.0,
            epochs: 200,
            t_gen: 100,
            lr: 0.01,
            batch_size: 256,
            encoder: EncoderConfig::default(),
            masker_hidden: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Laptop-sized schedule: 60 epochs, generation from epoch 30, batches of 64.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            t_gen: 30,
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        super::loss::check_q(self.q)?;
        if self.t_gen > self.epochs {
            return Err(DiscError::invalid(
                "t_gen",
                format!("{} exceeds epochs = {}", self.t_gen, self.epochs),
            ));
        }
        if !(self.lambda_g.is_finite() && self.lambda_g >= 0.0) {
            return Err(DiscError::invalid(
                "lambda_g",
                "must be finite and non-negative",
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DiscError::invalid("lr", "must be finite and positive"));
        }
        if self.batch_size == 0 {
            return Err(DiscError::invalid("batch_size", "must be positive"));
        }
        if self.encoder.layers == 0 || self.encoder.hidden == 0 {
            return Err(DiscError::invalid(
                "encoder",
                "layers and hidden width must be positive",
            ));
        }
        Ok(())
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            mode: self.mode,
            encoder: self.encoder,
            masker_hidden: self.masker_hidden,
            num_classes,
        }
    }
}

/// Batch-averaged losses and accuracies of one epoch. `l_g` is zero before
/// the generation phase and for vanilla models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_d: f64,
    pub l_g: f64,
    pub total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Number of distinct classes needed to cover labels of all graphs.
pub fn infer_num_classes(graphs: &[GraphInstance]) -> usize {
    graphs
        .iter()
        .map(|g| g.y.max(g.bias_label) + 1)
        .max()
        .unwrap_or(0)
}

/// Owns the model and optimiser between epochs so training can be paused
/// after any epoch and resumed from `(model, next_epoch)`.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub next_epoch: usize,
}

struct StepOutput {
    l_d: f64,
    l_g: f64,
    total: f64,
    correct: usize,
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(DiscError) -> DiscError {
    move |e| match e {
        DiscError::NonFinite { .. }
        | DiscError::NonFiniteGradient { .. }
        | DiscError::NotScalar { .. } => DiscError::Diverged {
            epoch,
            batch,
            reason: e.to_string(),
        },
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.architecture(num_classes), config.seed)?;
        Ok(Self::resume(config, model, 0))
    }

    pub fn resume(config: TrainConfig, model: Model, next_epoch: usize) -> Self {
        Trainer {
            optimizer: Adam::with_lr(config.lr),
            config,
            model,
            next_epoch,
        }
    }

    pub fn finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    fn step(
        &mut self,
        graphs: &[&GraphInstance],
        epoch: usize,
        batch_index: usize,
    ) -> Result<StepOutput> {
        let cfg = self.config;
        let batch = batch_graphs(graphs, None)?;
        let y: Arc<[usize]> = batch.labels.clone().into();
        let tape = Tape::new();
        let bind = Binder::new(&tape, &self.model.store);
        let (loss, probs, l_d, l_g): (Var, Var, Var, Option<Var>) = match &self.model.net {
            Net::Vanilla(v) => {
                let z = v.encoder.encode(&bind, &batch, None)?;
                let (p, lp) = v.classifier.classify_with_log(&bind, z)?;
                let l = tape.mean(cross_entropy(&tape, lp, &y)?)?;
                (l, p, l, None)
            }
            Net::Disc(net) => {
                let f = self.model.disc_forward(&bind, &batch)?;
                let heads = Heads {
                    causal: &net.causal_clf,
                    bias: &net.bias_clf,
                };
                let d = disentangle_loss(&bind, heads, f.z_causal, f.z_bias, &y, cfg.q)?;
                let l_g = if generation_active(epoch, cfg.t_gen) && cfg.lambda_g > 0.0 {
                    let mut r = swap_rng(cfg.seed, epoch, batch_index);
                    match counterfactual_swap(&tape, f.z_bias, &batch.labels, &mut r)? {
                        Some(s) => Some(
                            generation_loss(
                                &bind, heads, f.z_causal, s.z_b_hat, &y, &s.y_hat, &d.weights,
                                cfg.q,
                            )?
                            .loss,
                        ),
                        None => None,
                    }
                } else {
                    None
                };
                let total = total_loss(&tape, d.terms.loss, l_g, cfg.lambda_g, epoch, cfg.t_gen)?;
                (total, d.terms.causal_probs, d.terms.loss, l_g)
            }
        };
        let out = StepOutput {
            l_d: tape.value(l_d).item(),
            l_g: l_g.map_or(0.0, |v| tape.value(v).item()),
            total: tape.value(loss).item(),
            correct: tape
                .value(probs)
                .argmax_rows()
                .iter()
                .zip(y.iter())
                .filter(|(p, t)| p == t)
                .count(),
        };
        let grads = tape.backward(loss)?;
        let grads = bind.collect(&grads);
        drop(bind);
        self.optimizer.step(&mut self.model.store, &grads)?;
        Ok(out)
    }

    /// One pass over `train` in the seeded order of this epoch, followed by
    /// validation accuracy on `val` (if non-empty).
    pub fn run_epoch(
        &mut self,
        train: &[GraphInstance],
        val: &[GraphInstance],
    ) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(DiscError::invalid("train", "training split is empty"));
        }
        let epoch = self.next_epoch;
        let order = batch_order(
            train.len(),
            self.config.batch_size,
            self.config.seed,
            epoch as u64,
        );
        let (mut l_d, mut l_g, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (b, idx) in order.iter().enumerate() {
            let graphs: Vec<&GraphInstance> = idx.iter().map(|&i| &train[i]).collect();
            let s = self.step(&graphs, epoch, b).map_err(diverged(epoch, b))?;
            l_d += s.l_d;
            l_g += s.l_g;
            total += s.total;
            correct += s.correct;
        }
        let nb = order.len() as f64;
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(crate::eval::accuracy_of(&self.model, val)?)
        };
        let m = EpochMetrics {
            epoch,
            l_d: l_d / nb,
            l_g: l_g / nb,
            total: total / nb,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        };
        debug!("epoch {epoch}: {m:?}");
        self.next_epoch += 1;
        Ok(m)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        train: &[GraphInstance],
        val: &[GraphInstance],
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while !self.finished() {
            let m = self.run_epoch(train, val)?;
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Train from scratch for `config.epochs` epochs and return the last-epoch
/// model with its per-epoch metrics.
pub fn train(
    config: TrainConfig,
    train: &[GraphInstance],
    val: &[GraphInstance],
) -> Result<(Model, Vec<EpochMetrics>)> {
    let k = infer_num_classes(train).max(infer_num_classes(val));
    let mut t = Trainer::new(config, k)?;
    let metrics = t.run(train, val, |_, _| Ok(()))?;
    Ok((t.model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, DatasetSpec, Split};
    use crate::gnn::EncoderKind;

    fn tiny() -> (Vec<GraphInstance>, Vec<GraphInstance>) {
        let mut spec = DatasetSpec::default();
        spec.nodes_per_graph = 16;
        spec.motif_nodes = 8;
        spec.knn_k = 3;
        spec.sizes.train = 24;
        spec.sizes.val = 8;
        (
            generate_split(&spec, Split::Train).unwrap(),
            generate_split(&spec, Split::Val).unwrap(),
        )
    }

    fn config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 4,
            t_gen: 2,
            batch_size: 10,
            encoder: EncoderConfig {
                kind: EncoderKind::Gcn,
                layers: 2,
                hidden: 8,
            },
            masker_hidden: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.q, c.lambda_g, c.epochs, c.t_gen, c.lr, c.batch_size),
            (0.7, 10.0, 200, 100, 0.01, 256)
        );
        assert!(TrainConfig { t_gen: 300, ..c }.validate().is_err());
        assert!(TrainConfig { q: 0.0, ..c }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (tr, va) = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            t_gen: 0,
            ..config(Mode::Disc)
        };
        let (m, metrics) = train(cfg, &tr, &va).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(m, Model::init(cfg.architecture(4), cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = tiny();
        for mode in [Mode::Disc, Mode::Vanilla] {
            let (m1, a) = train(config(mode), &tr, &va).unwrap();
            let (m2, b) = train(config(mode), &tr, &va).unwrap();
            assert_eq!(a, b);
            assert_eq!(m1, m2);
            assert!(a.iter().all(|m| m.total.is_finite()));
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (tr, va) = tiny();
        let (full_model, full) = train(config(Mode::Disc), &tr, &va).unwrap();
        let mut first = Trainer::new(
            TrainConfig {
                epochs: 2,
                ..config(Mode::Disc)
            },
            4,
        )
        .unwrap();
        let mut metrics = first.run(&tr, &va, |_, _| Ok(())).unwrap();
        let mut second = Trainer::resume(config(Mode::Disc), first.model.clone(), first.next_epoch);
        metrics.extend(second.run(&tr, &va, |_, _| Ok(())).unwrap());
        assert_eq!(metrics, full);
        assert_eq!(second.model, full_model);
    }

    #[test]
    fn generation_phase_gate() {
        let (tr, va) = tiny();
        let (_, a) = train(config(Mode::Disc), &tr, &va).unwrap();
        let (_, b) = train(
            TrainConfig {
                lambda_g: 3.0,
                ..config(Mode::Disc)
            },
            &tr,
            &va,
        )
        .unwrap();
        assert_eq!(a[..2], b[..2]);
        assert!(a[..2].iter().all(|m| m.l_g == 0.0 && m.total == m.l_d));
        assert!(a[2..].iter().all(|m| m.l_g > 0.0));
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn divergence_reports_position() {
        let (tr, va) = tiny();
        let mut t = Trainer::new(config(Mode::Vanilla), 4).unwrap();
        t.model
            .store
            .iter_mut()
            .for_each(|p| p.value.data_mut().fill(f64::MAX));
        match t.run_epoch(&tr, &va) {
            Err(DiscError::Diverged {
                epoch: 0, batch: 0, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
