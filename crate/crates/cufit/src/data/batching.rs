//! Deterministic epoch batching.

use super::LabeledDataset;
use crate::seeding::derived_rng;
use rand::seq::SliceRandom;

/// Partition a fresh permutation of all sample indices into batches (the
/// last may be short). The permutation is a pure function of
/// `(shuffle_seed, epoch)`.
pub fn batches(
    dataset: &LabeledDataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = derived_rng(shuffle_seed, "shuffle", epoch);
    indices.shuffle(&mut rng);
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}
