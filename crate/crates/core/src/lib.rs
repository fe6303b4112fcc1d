//! Debiased graph classification by disentangling causal and bias
//! substructures with a learned edge mask.
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation and Adam.
//! * [`graphdata`]: graph records, batching, adjacency normalisation, I/O.
//! * [`datagen`]: synthetic motif-in-coloured-background benchmark.
//! * [`gnn`]: GCN and GIN encoders with differentiable edge weights.
//! * [`disc`]: masker, two-branch losses, counterfactual swap, training.
//! * [`eval`]: accuracy, mask AUC, probes, embedding export, pruning.

pub mod autodiff;
pub mod datagen;
pub mod disc;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graphdata;
pub mod rng;

pub use error::{DiscError, Result};
