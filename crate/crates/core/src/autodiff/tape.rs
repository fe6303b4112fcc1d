//! Define-by-run computation tape.
//!
//! Every operation appends a node holding its value and the recipe needed
//! to push gradients back to its inputs. A fresh [`Tape`] is built for each
//! training step; [`Var`] handles are plain indices into it and are `Copy`.
//!
//! ```
//! use disc_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::row(vec![1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, w).data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{DiscError, Result};

/// Floor applied to the arguments of `log` and `pow`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRow,
    MulCol,
    Affine,
    Pow,
    MatMul,
    ConcatCols,
    ConcatRows,
    Sigmoid,
    Relu,
    Log,
    Clamp,
    SoftmaxRows,
    LogSoftmaxRows,
    Mean,
    Sum,
    SumCols,
    SegmentSum,
    GatherRows,
    PickCols,
    Propagate,
    Detach,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::MulCol,
        OpKind::Affine,
        OpKind::Pow,
        OpKind::MatMul,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Log,
        OpKind::Clamp,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::SumCols,
        OpKind::SegmentSum,
        OpKind::GatherRows,
        OpKind::PickCols,
        OpKind::Propagate,
        OpKind::Detach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulCol => "mul_col",
            OpKind::Affine => "affine",
            OpKind::Pow => "pow",
            OpKind::MatMul => "matmul",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Clamp => "clamp",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::SumCols => "sum_cols",
            OpKind::SegmentSum => "segment_sum",
            OpKind::GatherRows => "gather_rows",
            OpKind::PickCols => "pick_cols",
            OpKind::Propagate => "propagate",
            OpKind::Detach => "detach",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Pow(Var, f64),
    MatMul(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Mean(Var),
    Sum(Var),
    SumCols(Var),
    SegmentSum(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    PickCols(Var, Arc<[usize]>),
    Propagate(Var, Var, Arc<[usize]>, Arc<[usize]>),
    Detach,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Affine(..) => OpKind::Affine,
            Op::Pow(..) => OpKind::Pow,
            Op::MatMul(..) => OpKind::MatMul,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Log(..) => OpKind::Log,
            Op::Clamp(..) => OpKind::Clamp,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::SumCols(..) => OpKind::SumCols,
            Op::SegmentSum(..) => OpKind::SegmentSum,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::PickCols(..) => OpKind::PickCols,
            Op::Propagate(..) => OpKind::Propagate,
            Op::Detach => OpKind::Detach,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Values of gradient-blocking nodes (constants and detaches), recorded on
/// one tape and substituted in creation order on another.
#[derive(Default)]
enum Freeze {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay {
        values: Vec<Tensor>,
        next: usize,
        mismatch: bool,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
    freeze: RefCell<Freeze>,
}

fn mismatch(op: &'static str, detail: String) -> DiscError {
    DiscError::Shape { op, detail }
}

fn dims(t: &Tensor) -> String {
    format!("{}x{}", t.rows(), t.cols())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[n x m] = a[n x k] * b[k x m]`
fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A tape that remembers the value of every constant and detach node.
    pub fn recording() -> Self {
        let t = Tape::default();
        *t.freeze.borrow_mut() = Freeze::Record(Vec::new());
        t
    }

    /// A tape whose constant and detach nodes take the recorded values, in
    /// creation order, regardless of what is passed in. Used to
    /// finite-difference a function with its stop-gradient inputs held fixed.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        let t = Tape::default();
        *t.freeze.borrow_mut() = Freeze::Replay {
            values,
            next: 0,
            mismatch: false,
        };
        t
    }

    /// Values recorded so far (empty unless built with [`Tape::recording`]).
    pub fn recorded(&self) -> Vec<Tensor> {
        match &*self.freeze.borrow() {
            Freeze::Record(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    /// Whether a replaying tape saw a node that did not line up with the
    /// recording.
    pub fn replay_mismatch(&self) -> bool {
        match &*self.freeze.borrow() {
            Freeze::Replay {
                values,
                next,
                mismatch,
            } => *mismatch || *next != values.len(),
            _ => false,
        }
    }

    fn frozen(&self, value: Tensor) -> Tensor {
        match &mut *self.freeze.borrow_mut() {
            Freeze::Off => value,
            Freeze::Record(v) => {
                v.push(value.clone());
                value
            }
            Freeze::Replay {
                values,
                next,
                mismatch,
            } => match values.get(*next) {
                Some(r) if r.shape() == value.shape() => {
                    *next += 1;
                    r.clone()
                }
                _ => {
                    *mismatch = true;
                    value
                }
            },
        }
    }

    /// Deliberately corrupt the backward rule of one operation kind (scales
    /// its input gradients by 1.5). Test fixture for the gradient checker.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_checked(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiscError::NonFinite { op: op_name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let value = self.frozen(value);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes.borrow()[v.0].op.kind()
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(mismatch(name, format!("{} vs {}", dims(ta), dims(tb))));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.rows(), ta.cols(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        self.push_checked(name, value, op, ng)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f);
        let ng = self.needs(a);
        self.push_checked(name, value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n x c] + row[1 x c]`, broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            if tr.rows() != 1 || tr.cols() != ta.cols() {
                return Err(mismatch("add_row", format!("{} + {}", dims(ta), dims(tr))));
            }
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            for chunk in data.chunks_mut(c.max(1)) {
                for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                    *x += b;
                }
            }
            Tensor::new(ta.rows(), c, data)?
        };
        let ng = self.needs(a) || self.needs(row);
        self.push_checked("add_row", value, Op::AddRow(a, row), ng)
    }

    /// `a[n x c] * col[n x 1]`, broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, ts) = (&nodes[a.0].value, &nodes[col.0].value);
            if ts.cols() != 1 || ts.rows() != ta.rows() {
                return Err(mismatch("mul_col", format!("{} * {}", dims(ta), dims(ts))));
            }
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            if c > 0 {
                for (chunk, &s) in data.chunks_mut(c).zip(ts.data()) {
                    chunk.iter_mut().for_each(|x| *x *= s);
                }
            }
            Tensor::new(ta.rows(), c, data)?
        };
        let ng = self.needs(a) || self.needs(col);
        self.push_checked("mul_col", value, Op::MulCol(a, col), ng)
    }

    /// `scale * a + shift`
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    /// `max(a, 1e-12) ^ exponent`
    pub fn pow(&self, a: Var, exponent: f64) -> Result<Var> {
        self.unary(
            "pow",
            a,
            |x| x.max(LOG_FLOOR).powf(exponent),
            Op::Pow(a, exponent),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.cols() != tb.rows() {
                return Err(mismatch("matmul", format!("{} x {}", dims(ta), dims(tb))));
            }
            let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = vec![0.0; n * m];
            matmul_into(ta.data(), tb.data(), n, k, m, &mut out);
            Tensor::new(n, m, out)?
        };
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("matmul", value, Op::MatMul(a, b), ng)
    }

    /// Side-by-side concatenation `[a | b]` (same row count).
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rows() != tb.rows() {
                return Err(mismatch(
                    "concat_cols",
                    format!("{} | {}", dims(ta), dims(tb)),
                ));
            }
            let mut data = Vec::with_capacity(ta.len() + tb.len());
            for r in 0..ta.rows() {
                data.extend_from_slice(ta.row_slice(r));
                data.extend_from_slice(tb.row_slice(r));
            }
            Tensor::new(ta.rows(), ta.cols() + tb.cols(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("concat_cols", value, Op::ConcatCols(a, b), ng)
    }

    /// Stacks `b` below `a` (same column count).
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.cols() != tb.cols() {
                return Err(mismatch(
                    "concat_rows",
                    format!("{} / {}", dims(ta), dims(tb)),
                ));
            }
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            Tensor::new(ta.rows() + tb.rows(), ta.cols(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("concat_rows", value, Op::ConcatRows(a, b), ng)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `ln(max(a, 1e-12))`
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            if c > 0 {
                for row in data.chunks_mut(c) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                }
            }
            Tensor::new(ta.rows(), c, data)?
        };
        let ng = self.needs(a);
        self.push_checked("softmax_rows", value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let c = ta.cols();
            let mut data = ta.data().to_vec();
            if c > 0 {
                for row in data.chunks_mut(c) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|x| *x -= lse);
                }
            }
            Tensor::new(ta.rows(), c, data)?
        };
        let ng = self.needs(a);
        self.push_checked("log_softmax_rows", value, Op::LogSoftmaxRows(a), ng)
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if ta.is_empty() {
                return Err(mismatch("mean", "empty tensor".into()));
            }
            Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64)
        };
        let ng = self.needs(a);
        self.push_checked("mean", value, Op::Mean(a), ng)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.data().iter().sum());
        let ng = self.needs(a);
        self.push_checked("sum", value, Op::Sum(a), ng)
    }

    /// Per-row sums, `n x c -> n x 1`.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor::column(
                (0..ta.rows())
                    .map(|r| ta.row_slice(r).iter().sum())
                    .collect(),
            )
        };
        let ng = self.needs(a);
        self.push_checked("sum_cols", value, Op::SumCols(a), ng)
    }

    /// Sums rows of `a` into `num_groups` output rows; row `i` lands in
    /// output row `groups[i]`.
    pub fn segment_sum(&self, a: Var, groups: Arc<[usize]>, num_groups: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if groups.len() != ta.rows() {
                return Err(mismatch(
                    "segment_sum",
                    format!("{} rows vs {} group ids", ta.rows(), groups.len()),
                ));
            }
            if let Some(&g) = groups.iter().find(|&&g| g >= num_groups) {
                return Err(mismatch(
                    "segment_sum",
                    format!("group {g} >= {num_groups}"),
                ));
            }
            let c = ta.cols();
            let mut out = vec![0.0; num_groups * c];
            for (r, &g) in groups.iter().enumerate() {
                for (o, &x) in out[g * c..(g + 1) * c].iter_mut().zip(ta.row_slice(r)) {
                    *o += x;
                }
            }
            Tensor::new(num_groups, c, out)?
        };
        let ng = self.needs(a);
        self.push_checked("segment_sum", value, Op::SegmentSum(a, groups), ng)
    }

    /// `out[r] = a[index[r]]`
    pub fn gather_rows(&self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if let Some(&i) = index.iter().find(|&&i| i >= ta.rows()) {
                return Err(mismatch(
                    "gather_rows",
                    format!("index {i} out of {}", dims(ta)),
                ));
            }
            let c = ta.cols();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                data.extend_from_slice(ta.row_slice(i));
            }
            Tensor::new(index.len(), c, data)?
        };
        let ng = self.needs(a);
        self.push_checked("gather_rows", value, Op::GatherRows(a, index), ng)
    }

    /// `out[r] = a[r, index[r]]`, giving an `n x 1` column.
    pub fn pick_cols(&self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if index.len() != ta.rows() {
                return Err(mismatch(
                    "pick_cols",
                    format!("{} rows vs {} indices", ta.rows(), index.len()),
                ));
            }
            if let Some(&i) = index.iter().find(|&&i| i >= ta.cols()) {
                return Err(mismatch(
                    "pick_cols",
                    format!("column {i} out of {}", dims(ta)),
                ));
            }
            Tensor::column(
                index
                    .iter()
                    .enumerate()
                    .map(|(r, &c)| ta.get(r, c))
                    .collect(),
            )
        };
        let ng = self.needs(a);
        self.push_checked("pick_cols", value, Op::PickCols(a, index), ng)
    }

    /// Weighted message passing over directed edges `e = (src[e] -> dst[e])`:
    /// `out[v] = sum_{e: dst[e] = v} coef[e] * a[src[e]]`, with `coef` an
    /// `E x 1` column. Equivalent to gathering, scaling, and segment-summing
    /// without materialising per-edge messages.
    pub fn propagate(
        &self,
        a: Var,
        coef: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tc) = (&nodes[a.0].value, &nodes[coef.0].value);
            let n = ta.rows();
            if src.len() != dst.len() || tc.shape() != [src.len(), 1] {
                return Err(mismatch(
                    "propagate",
                    format!(
                        "{} sources, {} targets, coefficients {}",
                        src.len(),
                        dst.len(),
                        dims(tc)
                    ),
                ));
            }
            if let Some(&v) = src.iter().chain(dst.iter()).find(|&&v| v >= n) {
                return Err(mismatch("propagate", format!("node {v} >= {n}")));
            }
            let c = ta.cols();
            let mut out = vec![0.0; n * c];
            for ((&u, &v), &w) in src.iter().zip(dst.iter()).zip(tc.data()) {
                if w == 0.0 {
                    continue;
                }
                for (o, &x) in out[v * c..(v + 1) * c].iter_mut().zip(ta.row_slice(u)) {
                    *o += w * x;
                }
            }
            Tensor::new(n, c, out)?
        };
        let ng = self.needs(a) || self.needs(coef);
        self.push_checked("propagate", value, Op::Propagate(a, coef, src, dst), ng)
    }

    /// Value-identical copy that stops gradient flow.
    pub fn detach(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.clone();
        let value = self.frozen(value);
        self.push(value, Op::Detach, false)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.shape() != [1, 1] {
            return Err(DiscError::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        if !lv.is_finite() {
            return Err(DiscError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let fault = self.fault.get();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Detach) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(DiscError::NonFiniteGradient {
                    op: node.op.kind().name(),
                });
            }
            let gain = if fault == Some(node.op.kind()) {
                1.5
            } else {
                1.0
            };
            backprop_node(&nodes, node, &g, gain, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in nodes.iter().zip(&grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(DiscError::NonFiniteGradient {
                        op: node.op.kind().name(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulation buffer for `v`, zero-initialised on first touch. `None` when
/// `v` does not take gradients.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let [r, c] = n.value.shape();
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(r, c))
            .data_mut(),
    )
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, gain: f64, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += gain * g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut()
                    .zip(gd)
                    .for_each(|(s, &g)| *s += sign * gain * g);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &y) in s.iter_mut().zip(gd).zip(tb.data()) {
                    *s += gain * g * y;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((s, &g), &x) in s.iter_mut().zip(gd).zip(ta.data()) {
                    *s += gain * g * x;
                }
            }
        }
        Op::AddRow(a, row) => {
            let c = g.cols();
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += gain * g);
            }
            if let Some(s) = slot(nodes, grads, *row) {
                if c > 0 {
                    for grow in gd.chunks(c) {
                        s.iter_mut().zip(grow).for_each(|(s, &g)| *s += gain * g);
                    }
                }
            }
        }
        Op::MulCol(a, col) => {
            let (ta, ts) = (val(*a), val(*col));
            let c = ta.cols();
            if c == 0 {
                return;
            }
            if let Some(s) = slot(nodes, grads, *a) {
                for ((srow, grow), &k) in s.chunks_mut(c).zip(gd.chunks(c)).zip(ts.data()) {
                    srow.iter_mut()
                        .zip(grow)
                        .for_each(|(s, &g)| *s += gain * g * k);
                }
            }
            if let Some(s) = slot(nodes, grads, *col) {
                for ((s, grow), arow) in s.iter_mut().zip(gd.chunks(c)).zip(ta.data().chunks(c)) {
                    *s += gain * grow.iter().zip(arow).map(|(g, x)| g * x).sum::<f64>();
                }
            }
        }
        Op::Affine(a, scale) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut()
                    .zip(gd)
                    .for_each(|(s, &g)| *s += gain * scale * g);
            }
        }
        Op::Pow(a, e) => {
            let ta = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &x) in s.iter_mut().zip(gd).zip(ta.data()) {
                    if x > LOG_FLOOR {
                        *s += gain * g * e * x.powf(e - 1.0);
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = G * B^T
                for i in 0..n {
                    let grow = &gd[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &tb.data()[p * m..(p + 1) * m];
                        let dot: f64 = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                        s[i * k + p] += gain * dot;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = A^T * G
                for i in 0..n {
                    let grow = &gd[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = gain * ta.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (s, &g) in s[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *s += aip * g;
                        }
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let c = ca + cb;
            if c == 0 {
                return;
            }
            if let Some(s) = slot(nodes, grads, *a) {
                for (r, grow) in gd.chunks(c).enumerate() {
                    for (s, &g) in s[r * ca..(r + 1) * ca].iter_mut().zip(&grow[..ca]) {
                        *s += gain * g;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for (r, grow) in gd.chunks(c).enumerate() {
                    for (s, &g) in s[r * cb..(r + 1) * cb].iter_mut().zip(&grow[ca..]) {
                        *s += gain * g;
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let na = val(*a).len();
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut()
                    .zip(&gd[..na])
                    .for_each(|(s, &g)| *s += gain * g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut()
                    .zip(&gd[na..])
                    .for_each(|(s, &g)| *s += gain * g);
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &y) in s.iter_mut().zip(gd).zip(y) {
                    *s += gain * g * y * (1.0 - y);
                }
            }
        }
        Op::Relu(a) => {
            let ta = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &x) in s.iter_mut().zip(gd).zip(ta.data()) {
                    if x > 0.0 {
                        *s += gain * g;
                    }
                }
            }
        }
        Op::Log(a) => {
            let ta = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &x) in s.iter_mut().zip(gd).zip(ta.data()) {
                    if x > LOG_FLOOR {
                        *s += gain * g / x;
                    }
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let ta = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, &g), &x) in s.iter_mut().zip(gd).zip(ta.data()) {
                    if x >= *lo && x <= *hi {
                        *s += gain * g;
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            if c == 0 {
                return;
            }
            if let Some(s) = slot(nodes, grads, *a) {
                for ((srow, grow), yrow) in
                    s.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((s, &g), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += gain * y * (g - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            if c == 0 {
                return;
            }
            if let Some(s) = slot(nodes, grads, *a) {
                for ((srow, grow), yrow) in
                    s.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c))
                {
                    let total: f64 = grow.iter().sum();
                    for ((s, &g), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += gain * (g - y.exp() * total);
                    }
                }
            }
        }
        Op::Mean(a) | Op::Sum(a) => {
            let n = val(*a).len() as f64;
            let k = if matches!(node.op, Op::Mean(..)) {
                gd[0] / n
            } else {
                gd[0]
            };
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|s| *s += gain * k);
            }
        }
        Op::SumCols(a) => {
            let c = val(*a).cols();
            if c == 0 {
                return;
            }
            if let Some(s) = slot(nodes, grads, *a) {
                for (srow, &g) in s.chunks_mut(c).zip(gd) {
                    srow.iter_mut().for_each(|s| *s += gain * g);
                }
            }
        }
        Op::Propagate(a, coef, src, dst) => {
            let (ta, tc) = (val(*a), val(*coef));
            let c = ta.cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for ((&u, &v), &w) in src.iter().zip(dst.iter()).zip(tc.data()) {
                    let k = gain * w;
                    for (s, &g) in s[u * c..(u + 1) * c]
                        .iter_mut()
                        .zip(&gd[v * c..(v + 1) * c])
                    {
                        *s += k * g;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *coef) {
                for (e, (&u, &v)) in src.iter().zip(dst.iter()).enumerate() {
                    let dot: f64 = gd[v * c..(v + 1) * c]
                        .iter()
                        .zip(ta.row_slice(u))
                        .map(|(g, x)| g * x)
                        .sum();
                    s[e] += gain * dot;
                }
            }
        }
        Op::SegmentSum(a, groups) => {
            let c = val(*a).cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for (r, &grp) in groups.iter().enumerate() {
                    for (s, &g) in s[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&gd[grp * c..(grp + 1) * c])
                    {
                        *s += gain * g;
                    }
                }
            }
        }
        Op::GatherRows(a, index) => {
            let c = val(*a).cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for (r, &i) in index.iter().enumerate() {
                    for (s, &g) in s[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gd[r * c..(r + 1) * c])
                    {
                        *s += gain * g;
                    }
                }
            }
        }
        Op::PickCols(a, index) => {
            let c = val(*a).cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for (r, (&col, &g)) in index.iter().zip(gd).enumerate() {
                    s[r * c + col] += gain * g;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable is unreachable from the loss or detached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let [r, c] = tape.shape(v);
            Tensor::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc(v: &[usize]) -> Arc<[usize]> {
        Arc::from(v)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let t = Tape::new();
        for k in [1usize, 3, 7] {
            let x = t.leaf(Tensor::zeros(1, k));
            let y = t.softmax_rows(x).unwrap();
            for &p in t.value(y).data() {
                assert!((p - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1000.0, 0.0, -1000.0]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        assert!((v.data()[0] - 1.0).abs() < 1e-12);
        assert!(v.data().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn segment_sum_groups_rows() {
        let t = Tape::new();
        let x = t.leaf(Tensor::column(vec![1.0, 2.0, 3.0]));
        let y = t.segment_sum(x, rc(&[0, 0, 1]), 2).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.5, -2.0]));
        let w = t.leaf(Tensor::row(vec![3.0, 4.0]));
        let dx = t.detach(x);
        assert_eq!(*t.value(dx), *t.value(x));
        let loss = t.sum(t.mul(dx, w).unwrap()).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(&t, x).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(&t, w).data(), &[1.5, -2.0]);

        let loss = t.sum(t.mul(x, w).unwrap()).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let t = Tape::new();
        let w = t.leaf(Tensor::row(vec![1.0, 2.0]));
        let loss = t.sum(t.mul(w, w).unwrap()).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let t = Tape::new();
        let w = t.leaf(Tensor::row(vec![1.0, 2.0]));
        let c = t.constant(Tensor::row(vec![5.0, 6.0]));
        let loss = t.sum(c).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3 x 2x3"), "{err}");
        let err = t
            .add(a, t.leaf(Tensor::zeros(3, 2)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("add") && err.contains("3x2"), "{err}");
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let t = Tape::new();
        let a = t.leaf(Tensor::scalar(f64::MAX));
        assert!(matches!(
            t.affine(a, 10.0, 0.0),
            Err(DiscError::NonFinite { op: "affine" })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 1));
        assert!(matches!(
            t.backward(a),
            Err(DiscError::NotScalar { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn log_and_pow_are_floored() {
        let t = Tape::new();
        let a = t.leaf(Tensor::row(vec![0.0, -1.0]));
        let l = t.log(a).unwrap();
        assert!(t
            .value(l)
            .data()
            .iter()
            .all(|v| (*v - LOG_FLOOR.ln()).abs() < 1e-12));
        let p = t.pow(a, 0.7).unwrap();
        let g = t.backward(t.sum(p).unwrap()).unwrap();
        assert_eq!(g.wrt(&t, a).data(), &[0.0, 0.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
