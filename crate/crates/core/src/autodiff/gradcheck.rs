use super::param::{Binder, ParamStore};
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{DiscError, Result};

/// Gradients smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Maximum relative error between reverse-mode gradients of `f` and
/// central differences with step `eps`, over every coordinate of `inputs`.
///
/// `f` receives a fresh tape plus one leaf per input and must return a
/// scalar. Constants and `detach` outputs keep their unperturbed values.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(f, inputs, eps, None)
}

pub(crate) fn finite_difference_check_with<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    fault: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::recording();
        tape.inject_fault(fault);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        (
            vars.iter()
                .map(|&v| grads.wrt(&tape, v))
                .collect::<Vec<_>>(),
            tape.recorded(),
        )
    };
    let (analytic, frozen) = analytic;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::replaying(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        if tape.replay_mismatch() {
            return Err(DiscError::invalid(
                "gradcheck",
                "loss graph changed under perturbation",
            ));
        }
        let v = tape.value(loss).item();
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of a loss over every scalar of `store`.
///
/// Constants and `detach` outputs are recorded on the analytic pass and held
/// fixed while perturbing, so the numeric derivative sees the same
/// stop-gradient structure as reverse mode.
pub fn parameter_gradient_check<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&Binder) -> Result<Var>,
{
    parameter_gradient_check_with(store, f, eps, None)
}

pub(crate) fn parameter_gradient_check_with<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    fault: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&Binder) -> Result<Var>,
{
    let (analytic, frozen) = {
        let tape = Tape::recording();
        tape.inject_fault(fault);
        let bind = Binder::new(&tape, store);
        let loss = f(&bind)?;
        let grads = tape.backward(loss)?;
        (bind.collect(&grads), tape.recorded())
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::replaying(frozen.clone());
        let bind = Binder::new(&tape, s);
        let loss = f(&bind)?;
        if tape.replay_mismatch() {
            return Err(DiscError::invalid(
                "gradcheck",
                "loss graph changed under perturbation",
            ));
        }
        let v = tape.value(loss).item();
        Ok(v)
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).value.len() {
            let x = store.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = x + eps;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = x - eps;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = x;
            worst = worst.max(relative_error(
                analytic[k].data()[i],
                (up - down) / (2.0 * eps),
            ));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::row(vec![0.3, -1.2, 2.0]);
        let c = Tensor::row(vec![1.0, 2.0, -0.5]);
        let err = finite_difference_check(
            |t, v| {
                let c = t.constant(c.clone());
                t.sum(t.mul(v[0], c)?)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn detects_wrong_rule() {
        let x = Tensor::row(vec![0.4, -0.7]);
        let f = |t: &Tape, v: &[Var]| t.sum(t.sigmoid(v[0])?);
        let ok = finite_difference_check_with(f, &[x.clone()], 1e-5, None).unwrap();
        let bad = finite_difference_check_with(f, &[x], 1e-5, Some(OpKind::Sigmoid)).unwrap();
        assert!(ok < 1e-8);
        assert!(bad > 0.1);
    }

    #[test]
    fn detached_paths_are_frozen_under_perturbation() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![0.7, -0.4]));
        // loss = sum(w * sg(w)): reverse mode gives sg(w), not 2w.
        let f = |b: &Binder| {
            let t = b.tape;
            let p = b.param(w);
            t.sum(t.mul(p, t.detach(p))?)
        };
        assert!(parameter_gradient_check(&store, f, 1e-5).unwrap() < 1e-8);
    }
}
