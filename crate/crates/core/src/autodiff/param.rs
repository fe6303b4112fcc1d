use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{DiscError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Parameter {
            name: name.into(),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Lazily places parameters of a store onto a tape as differentiable leaves.
pub struct Binder<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).value.clone());
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// One gradient per parameter, zero-filled for parameters that were not
    /// used or were unreachable from the loss.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .map(|(id, p)| match bound[id.0].and_then(|v| grads.get(v)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.rows(), p.value.cols()),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Bias-corrected Adam update of every parameter in `store`.
    pub fn step(&self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(DiscError::Shape {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (p, g) in store.params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(DiscError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "gradient shape {:?} for `{}` {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(DiscError::NonFiniteGradient { op: "adam_step" });
            }
        }
        for (p, g) in store.params.iter_mut().zip(grads) {
            self.update(p, g.data());
        }
        Ok(())
    }

    fn update(&self, p: &mut Parameter, g: &[f64]) {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let values = p.value.data_mut();
        for i in 0..g.len() {
            let m = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * g[i];
            let v = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * g[i] * g[i];
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            values[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
    }
}
