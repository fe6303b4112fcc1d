//! Two-branch debiasing: edge masker, causal/bias encoders, disentangling
//! and counterfactual losses, and the training loop.

pub mod checks;
mod loss;
mod masker;
mod model;
mod swap;
mod train;

pub use loss::{
    check_q, cross_entropy, disentangle_loss, gce, gce_loss, generation_active, generation_loss,
    total_loss, unbias_weight, Disentangled, Heads, LossTerms,
};
pub use masker::{
    reference_score, split_graph, EdgeScores, MaskGenerator, SubgraphView, LOGIT_BOUND,
};
pub use model::{Architecture, DiscForward, DiscNet, Embeddings, Mode, Model, Net, EVAL_BATCH};
pub use swap::{apply_swap, counterfactual_swap, random_permutation, swap_rng, Swapped};
pub use train::{infer_num_classes, train, EpochMetrics, TrainConfig, Trainer};
