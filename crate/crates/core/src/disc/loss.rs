use std::sync::Arc;

use crate::autodiff::{Binder, Tape, Tensor, Var};
use crate::error::{DiscError, Result};
use crate::gnn::LinearClassifier;

pub fn check_q(q: f64) -> Result<()> {
    if q.is_finite() && q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(DiscError::invalid(
            "q",
            format!("must lie in (0, 1], got {q}"),
        ))
    }
}

/// Per-sample `-ln p_y` as an `n x 1` column, from row-wise log-probabilities.
pub fn cross_entropy(t: &Tape, log_probs: Var, y: &Arc<[usize]>) -> Result<Var> {
    t.affine(t.pick_cols(log_probs, y.clone())?, -1.0, 0.0)
}

/// Per-sample `(1 - p_y^q) / q`, with `p_y` floored at `1e-12`.
pub fn gce(t: &Tape, probs: Var, y: &Arc<[usize]>, q: f64) -> Result<Var> {
    check_q(q)?;
    let py = t.pick_cols(probs, y.clone())?;
    t.affine(t.pow(py, q)?, -1.0 / q, 1.0 / q)
}

pub fn gce_loss(t: &Tape, probs: Var, y: &Arc<[usize]>, q: f64) -> Result<Var> {
    t.mean(gce(t, probs, y, q)?)
}

/// `ce_b / (ce_c + ce_b)` per sample; `0.5` where both vanish.
pub fn unbias_weight(ce_c: &[f64], ce_b: &[f64]) -> Vec<f64> {
    ce_c.iter()
        .zip(ce_b)
        .map(|(&c, &b)| if c + b > 0.0 { b / (c + b) } else { 0.5 })
        .collect()
}

/// The two linear heads of the two-branch model.
#[derive(Clone, Copy)]
pub struct Heads<'a> {
    pub causal: &'a LinearClassifier,
    pub bias: &'a LinearClassifier,
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    /// `mean(W * CE(C_c(.), y))`.
    pub weighted_ce: Var,
    /// `mean(GCE(C_b(.), y'))`.
    pub gce: Var,
    pub loss: Var,
    /// Class probabilities of the causal head, `n x K`.
    pub causal_probs: Var,
}

pub struct Disentangled {
    pub terms: LossTerms,
    /// Unbias weights of the unswapped pair.
    pub weights: Arc<[f64]>,
}

fn weighted_mean(t: &Tape, per_sample: Var, weights: &[f64]) -> Result<Var> {
    let w = t.constant(Tensor::column(weights.to_vec()));
    t.mean(t.mul(per_sample, w)?)
}

/// `L_D` with cross-branch halves detached: the causal head sees
/// `[z_c; sg(z_b)]`, the bias head sees `[sg(z_c); z_b]`.
pub fn disentangle_loss(
    bind: &Binder,
    heads: Heads,
    z_c: Var,
    z_b: Var,
    y: &Arc<[usize]>,
    q: f64,
) -> Result<Disentangled> {
    check_q(q)?;
    let t = bind.tape;
    let causal_in = t.concat_cols(z_c, t.detach(z_b))?;
    let bias_in = t.concat_cols(t.detach(z_c), z_b)?;
    let (pc, lc) = heads.causal.classify_with_log(bind, causal_in)?;
    let (pb, lb) = heads.bias.classify_with_log(bind, bias_in)?;
    let ce_c = cross_entropy(t, lc, y)?;
    let ce_b = cross_entropy(t, lb, y)?;
    let weights: Arc<[f64]> = unbias_weight(t.value(ce_c).data(), t.value(ce_b).data()).into();
    let weighted_ce = weighted_mean(t, ce_c, &weights)?;
    let g = gce_loss(t, pb, y, q)?;
    let loss = t.add(weighted_ce, g)?;
    Ok(Disentangled {
        terms: LossTerms {
            weighted_ce,
            gce: g,
            loss,
            causal_probs: pc,
        },
        weights,
    })
}

/// `L_G` on counterfactual pairs `[z_c; z_b[perm]]`. The swapped bias half is
/// detached in the causal term; the bias term is scored against the swapped
/// labels `y_hat`; `weights` come from the unswapped pair.
#[allow(clippy::too_many_arguments)]
pub fn generation_loss(
    bind: &Binder,
    heads: Heads,
    z_c: Var,
    z_b_hat: Var,
    y: &Arc<[usize]>,
    y_hat: &Arc<[usize]>,
    weights: &[f64],
    q: f64,
) -> Result<LossTerms> {
    check_q(q)?;
    let t = bind.tape;
    let causal_in = t.concat_cols(z_c, t.detach(z_b_hat))?;
    let bias_in = t.concat_cols(t.detach(z_c), z_b_hat)?;
    let (pc, lc) = heads.causal.classify_with_log(bind, causal_in)?;
    let pb = heads.bias.classify(bind, bias_in)?;
    let weighted_ce = weighted_mean(t, cross_entropy(t, lc, y)?, weights)?;
    let g = gce_loss(t, pb, y_hat, q)?;
    let loss = t.add(weighted_ce, g)?;
    Ok(LossTerms {
        weighted_ce,
        gce: g,
        loss,
        causal_probs: pc,
    })
}

/// Whether the generation term is active at a 0-based epoch.
pub fn generation_active(epoch: usize, t_gen: usize) -> bool {
    epoch >= t_gen
}

/// `L_D` before `t_gen`, `L_D + lambda_g * L_G` from `t_gen` on. A missing
/// `l_g` (batch too small to swap) contributes nothing.
pub fn total_loss(
    t: &Tape,
    l_d: Var,
    l_g: Option<Var>,
    lambda_g: f64,
    epoch: usize,
    t_gen: usize,
) -> Result<Var> {
    match l_g {
        Some(g) if generation_active(epoch, t_gen) && lambda_g != 0.0 => {
            t.add(l_d, t.affine(g, lambda_g, 0.0)?)
        }
        _ => Ok(l_d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::rng::stream;

    fn probs(t: &Tape, rows: &[Vec<f64>]) -> Var {
        t.constant(Tensor::from_rows(rows).unwrap())
    }

    fn labels(y: &[usize]) -> Arc<[usize]> {
        y.to_vec().into()
    }

    #[test]
    fn gce_examples() {
        let t = Tape::new();
        let y = labels(&[0]);
        let one = probs(&t, &[vec![1.0, 0.0]]);
        for q in [0.1, 0.7, 1.0] {
            assert_eq!(t.value(gce_loss(&t, one, &y, q).unwrap()).item(), 0.0);
        }
        let half = probs(&t, &[vec![0.5, 0.5]]);
        assert!((t.value(gce_loss(&t, half, &y, 1.0).unwrap()).item() - 0.5).abs() < 1e-15);
        let v = t.value(gce_loss(&t, half, &y, 0.7).unwrap()).item();
        // (1 - 2^-0.7) / 0.7 to 30 digits: 0.549182561896488368...
        assert!((v - 0.549_182_561_896_488_4).abs() < 1e-12, "{v}");
        let p = probs(&t, &[vec![0.3, 0.7]]);
        let g = t.value(gce_loss(&t, p, &y, 1e-4).unwrap()).item();
        let ce = -(0.3f64).ln();
        assert!((g - ce).abs() / ce < 1e-3);
    }

    #[test]
    fn gce_rejects_bad_q() {
        let t = Tape::new();
        let p = probs(&t, &[vec![0.5, 0.5]]);
        for q in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(gce_loss(&t, p, &labels(&[0]), q).is_err());
        }
    }

    #[test]
    fn gce_floors_zero_probability() {
        let t = Tape::new();
        let p = probs(&t, &[vec![0.0, 1.0]]);
        let v = t.value(gce_loss(&t, p, &labels(&[0]), 0.5).unwrap()).item();
        assert!((v - (1.0 - 1e-6) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn unbias_weight_examples() {
        assert_eq!(unbias_weight(&[0.4], &[0.4]), vec![0.5]);
        assert_eq!(unbias_weight(&[0.7], &[0.0]), vec![0.0]);
        assert!((unbias_weight(&[0.3], &[0.9])[0] - 0.75).abs() < 1e-15);
        assert_eq!(unbias_weight(&[0.0], &[0.0]), vec![0.5]);
    }

    #[test]
    fn total_loss_gate() {
        let t = Tape::new();
        let d = t.constant(Tensor::scalar(0.2));
        let g = t.constant(Tensor::scalar(0.05));
        let val = |v| t.value(v).item();
        assert_eq!(val(total_loss(&t, d, Some(g), 10.0, 3, 5).unwrap()), 0.2);
        assert_eq!(val(total_loss(&t, d, Some(g), 0.0, 50, 5).unwrap()), 0.2);
        assert!((val(total_loss(&t, d, Some(g), 10.0, 5, 5).unwrap()) - 0.7).abs() < 1e-15);
        assert_eq!(val(total_loss(&t, d, None, 10.0, 9, 5).unwrap()), 0.2);
    }

    fn heads(
        store: &mut ParamStore,
        width: usize,
        k: usize,
        seed: u64,
    ) -> (LinearClassifier, LinearClassifier) {
        let mut r = stream(seed, "init", 0);
        (
            LinearClassifier::new(store, "c", 2 * width, k, &mut r),
            LinearClassifier::new(store, "b", 2 * width, k, &mut r),
        )
    }

    fn embeddings(rows: usize, cols: usize, shift: f64) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64) * 0.37 + shift).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_swap_reproduces_disentangle_loss() {
        let mut store = ParamStore::new();
        let (c, b) = heads(&mut store, 3, 4, 1);
        let t = Tape::new();
        let bind = Binder::new(&t, &store);
        let zc = t.leaf(embeddings(5, 3, 0.0));
        let zb = t.leaf(embeddings(5, 3, 1.0));
        let y = labels(&[0, 1, 2, 3, 1]);
        let h = Heads {
            causal: &c,
            bias: &b,
        };
        let d = disentangle_loss(&bind, h, zc, zb, &y, 0.7).unwrap();
        let g = generation_loss(&bind, h, zc, zb, &y, &y, &d.weights, 0.7).unwrap();
        assert_eq!(t.value(d.terms.loss).item(), t.value(g.loss).item());
    }

    #[test]
    fn generation_loss_matches_recomputation() {
        let mut store = ParamStore::new();
        let (c, b) = heads(&mut store, 2, 3, 2);
        let t = Tape::new();
        let bind = Binder::new(&t, &store);
        let zc_t = embeddings(4, 2, 0.3);
        let zb_t = embeddings(4, 2, 2.0);
        let perm = [2usize, 0, 3, 1];
        let y = [0usize, 1, 2, 1];
        let y_hat: Vec<usize> = perm.iter().map(|&p| y[p]).collect();
        let zb_hat_t = Tensor::from_rows(
            &perm
                .iter()
                .map(|&p| zb_t.row_slice(p).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let w = [0.2, 0.5, 0.9, 0.4];
        let zc = t.leaf(zc_t.clone());
        let zbh = t.leaf(zb_hat_t.clone());
        let got = generation_loss(
            &bind,
            Heads {
                causal: &c,
                bias: &b,
            },
            zc,
            zbh,
            &labels(&y),
            &y_hat.clone().into(),
            &w,
            0.7,
        )
        .unwrap();
        let got = t.value(got.loss).item();

        // Direct evaluation with plain loops.
        let head = |clf: &LinearClassifier, z: &[f64]| -> Vec<f64> {
            let wt = &store.get(clf.dense.weight).value;
            let bs = &store.get(clf.dense.bias).value;
            let logits: Vec<f64> = (0..clf.classes)
                .map(|k| {
                    bs.data()[k]
                        + z.iter()
                            .enumerate()
                            .map(|(i, v)| v * wt.get(i, k))
                            .sum::<f64>()
                })
                .collect();
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let mut ce_term = 0.0;
        let mut gce_term = 0.0;
        for i in 0..4 {
            let z: Vec<f64> = zc_t
                .row_slice(i)
                .iter()
                .chain(zb_hat_t.row_slice(i))
                .copied()
                .collect();
            ce_term += w[i] * -head(&c, &z)[y[i]].ln();
            gce_term += (1.0 - head(&b, &z)[y_hat[i]].powf(0.7)) / 0.7;
        }
        let want = ce_term / 4.0 + gce_term / 4.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn routing_blocks_cross_branch_gradients() {
        let mut store = ParamStore::new();
        let (c, b) = heads(&mut store, 3, 2, 3);
        let t = Tape::new();
        let bind = Binder::new(&t, &store);
        let zc = t.leaf(embeddings(4, 3, 0.1));
        let zb = t.leaf(embeddings(4, 3, 0.9));
        let y = labels(&[0, 1, 1, 0]);
        let d = disentangle_loss(
            &bind,
            Heads {
                causal: &c,
                bias: &b,
            },
            zc,
            zb,
            &y,
            0.7,
        )
        .unwrap();
        let gg = t.backward(d.terms.gce).unwrap();
        assert!(gg.wrt(&t, zc).data().iter().all(|&v| v == 0.0));
        assert!(gg.wrt(&t, zb).data().iter().any(|&v| v != 0.0));
        let gc = t.backward(d.terms.weighted_ce).unwrap();
        assert!(gc.wrt(&t, zb).data().iter().all(|&v| v == 0.0));
        assert!(gc.wrt(&t, zc).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn generation_causal_head_ignores_swapped_labels() {
        let mut store = ParamStore::new();
        let (c, b) = heads(&mut store, 2, 3, 4);
        let run = |y_hat: &[usize]| {
            let t = Tape::new();
            let bind = Binder::new(&t, &store);
            let zc = t.leaf(embeddings(3, 2, 0.0));
            let zb = t.leaf(embeddings(3, 2, 0.5));
            let g = generation_loss(
                &bind,
                Heads {
                    causal: &c,
                    bias: &b,
                },
                zc,
                zb,
                &labels(&[0, 1, 2]),
                &labels(y_hat),
                &[0.3, 0.6, 0.5],
                0.7,
            )
            .unwrap();
            let grads = t.backward(g.loss).unwrap();
            let all = bind.collect(&grads);
            (all[c.dense.weight.0].clone(), all[b.dense.weight.0].clone())
        };
        let (c1, b1) = run(&[0, 1, 2]);
        let (c2, b2) = run(&[2, 2, 0]);
        assert_eq!(c1, c2);
        assert_ne!(b1, b2);
    }
}
