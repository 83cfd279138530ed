//! Symmetric label-noise injection.

use super::{CorruptionMask, LabeledDataset, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::seeding::derived_rng;
use rand::Rng;

/// Flip each observed label independently with probability `spec.rate`; a
/// flipped label is drawn uniformly from the `k-1` classes different from
/// the true label. True labels, inputs, and ids are never touched.
pub fn inject_symmetric_noise(
    dataset: &LabeledDataset,
    spec: &NoiseSpec,
) -> Result<(LabeledDataset, CorruptionMask)> {
    if dataset.split != Split::Train {
        return Err(Error::data("noise injection is only defined for train splits"));
    }
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::config(format!("noise rate must be in [0,1], got {}", spec.rate)));
    }
    let k = dataset.class_count;
    if spec.rate > 0.0 && k < 2 {
        return Err(Error::data("cannot flip labels with fewer than 2 classes"));
    }
    if dataset.samples.iter().any(|s| s.observed_label != s.true_label) {
        return Err(Error::data(
            "dataset already contains label noise; inject on a clean dataset",
        ));
    }

    let mut rng = derived_rng(spec.seed, "noise", 0);
    let mut noisy = dataset.clone();
    for sample in &mut noisy.samples {
        let flip: f64 = rng.random();
        if flip < spec.rate {
            // uniform over the k-1 labels != true_label
            let offset = rng.random_range(0..k - 1);
            sample.observed_label = (sample.true_label + 1 + offset) % k;
        }
    }
    let mask = CorruptionMask::from_dataset(&noisy);
    Ok((noisy, mask))
}
