use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::{self, StreamRng};

/// Bias embeddings and labels permuted by one shared `perm`:
/// `z_b_hat[i] = z_b[perm[i]]`, `y_hat[i] = y[perm[i]]`.
#[derive(Clone, Debug)]
pub struct Swapped {
    pub perm: Arc<[usize]>,
    pub z_b_hat: Var,
    pub y_hat: Arc<[usize]>,
}

/// RNG for the swap of one batch, independent of every other stream.
pub fn swap_rng(seed: u64, epoch: usize, batch: usize) -> StreamRng {
    rng::stream(seed, "swap", ((epoch as u64) << 32) | batch as u64)
}

/// Uniform permutation of `0..n` (Fisher-Yates).
pub fn random_permutation(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Apply `perm` to bias embeddings and labels together.
pub fn apply_swap(t: &Tape, z_b: Var, y: &[usize], perm: Vec<usize>) -> Result<Swapped> {
    let perm: Arc<[usize]> = perm.into();
    let z_b_hat = t.gather_rows(z_b, perm.clone())?;
    let y_hat: Arc<[usize]> = perm.iter().map(|&p| y[p]).collect();
    Ok(Swapped {
        perm,
        z_b_hat,
        y_hat,
    })
}

/// Random counterfactual swap; `None` for batches of fewer than two graphs.
pub fn counterfactual_swap(
    t: &Tape,
    z_b: Var,
    y: &[usize],
    rng: &mut StreamRng,
) -> Result<Option<Swapped>> {
    if y.len() < 2 {
        return Ok(None);
    }
    let perm = random_permutation(y.len(), rng);
    apply_swap(t, z_b, y, perm).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn identity_and_transposition() {
        let t = Tape::new();
        let zb = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = apply_swap(&t, zb, &[0, 1], vec![0, 1]).unwrap();
        assert_eq!(*t.value(s.z_b_hat), *t.value(zb));
        assert_eq!(&*s.y_hat, &[0, 1]);
        let s = apply_swap(&t, zb, &[0, 1], vec![1, 0]).unwrap();
        assert_eq!(t.value(s.z_b_hat).data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(&*s.y_hat, &[1, 0]);
    }

    #[test]
    fn single_graph_batch_is_skipped() {
        let t = Tape::new();
        let zb = t.leaf(Tensor::zeros(1, 3));
        assert!(counterfactual_swap(&t, zb, &[2], &mut swap_rng(0, 0, 0))
            .unwrap()
            .is_none());
    }

    #[test]
    fn swap_streams_are_reproducible() {
        assert_eq!(
            random_permutation(20, &mut swap_rng(5, 3, 1)),
            random_permutation(20, &mut swap_rng(5, 3, 1))
        );
        assert_ne!(
            random_permutation(20, &mut swap_rng(5, 3, 1)),
            random_permutation(20, &mut swap_rng(5, 3, 2))
        );
    }

    #[test]
    fn positions_are_uniform() {
        let n = 5;
        let draws = 10_000;
        let mut counts = vec![vec![0usize; n]; n];
        let mut r = swap_rng(11, 0, 0);
        for _ in 0..draws {
            for (pos, &src) in random_permutation(n, &mut r).iter().enumerate() {
                counts[src][pos] += 1;
            }
        }
        let p = 1.0 / n as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for row in &counts {
            for &c in row {
                assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{c}");
            }
        }
    }
}
