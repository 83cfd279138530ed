//! Dataset ingestion and label-noise bookkeeping.
//!
//! A [`LabeledDataset`] carries both the true label and the observed
//! (possibly corrupted) label for every sample, so selection-quality metrics
//! can be computed without re-reading the clean source. Inputs are either
//! image tensors (`H×W×C`, `f32` in `[0,1]`) or cached feature vectors.

mod batching;
mod folder;
mod noise;
mod packed;
mod synthetic;

pub use batching::batches;
pub use folder::load_image_folder;
pub use noise::inject_symmetric_noise;
pub use packed::{load_packed, write_packed};
pub use synthetic::{make_synthetic, SyntheticShape, SyntheticSpec};

use crate::error::{Error, Result};
use ndarray::{Array1, Array3};
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Sample input: an image tensor or a pre-extracted feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    /// `(H, W, C)` pixels in `[0, 1]`.
    Image(Array3<f32>),
    /// Cached backbone features of length `c`.
    Features(Array1<f32>),
}

impl SampleInput {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            SampleInput::Image(a) => a.shape().to_vec(),
            SampleInput::Features(a) => vec![a.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub input: SampleInput,
    pub true_label: usize,
    pub observed_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub class_count: usize,
    pub samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    /// Construct with invariant checks: unique ids, `class_count >= 2`,
    /// labels in range, identical input dimensions.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        class_count: usize,
        samples: Vec<LabeledSample>,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::data(format!("class_count must be >= 2, got {class_count}")));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        let mut dims: Option<Vec<usize>> = None;
        for s in &samples {
            if !seen.insert(s.id) {
                return Err(Error::data(format!("duplicate sample id {}", s.id)));
            }
            if s.true_label >= class_count || s.observed_label >= class_count {
                return Err(Error::data(format!(
                    "sample {}: label out of range (true {}, observed {}, class_count {})",
                    s.id, s.true_label, s.observed_label, class_count
                )));
            }
            match &dims {
                None => dims = Some(s.input.dims()),
                Some(d) => {
                    if *d != s.input.dims() {
                        return Err(Error::shape(format!(
                            "sample {}: input dims {:?} differ from {:?}",
                            s.id,
                            s.input.dims(),
                            d
                        )));
                    }
                }
            }
        }
        Ok(LabeledDataset { name: name.into(), split, class_count, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn is_image_mode(&self) -> bool {
        matches!(self.samples.first().map(|s| &s.input), Some(SampleInput::Image(_)))
    }

    /// `(H, W, C)` of image datasets.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        match self.samples.first().map(|s| &s.input) {
            Some(SampleInput::Image(a)) => {
                let d = a.dim();
                Some((d.0, d.1, d.2))
            }
            _ => None,
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match self.samples.first().map(|s| &s.input) {
            Some(SampleInput::Features(a)) => Some(a.len()),
            _ => None,
        }
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.observed_label).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.true_label).collect()
    }
}

/// Symmetric label-noise specification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Flip probability in `[0, 1]`.
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::config(format!("noise rate must be in [0,1], got {rate}")));
        }
        Ok(NoiseSpec { rate, seed })
    }
}

/// Ground-truth corruption bookkeeping, aligned with the sample order of the
/// dataset it was produced from. `flags[i]` is true iff
/// `observed_label != true_label` for that sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionMask {
    pub ids: Vec<usize>,
    pub flags: Vec<bool>,
}

impl CorruptionMask {
    pub fn from_dataset(dataset: &LabeledDataset) -> Self {
        CorruptionMask {
            ids: dataset.samples.iter().map(|s| s.id).collect(),
            flags: dataset.samples.iter().map(|s| s.observed_label != s.true_label).collect(),
        }
    }

    /// All-clean mask for a dataset without injected noise.
    pub fn all_clean(n: usize) -> Self {
        CorruptionMask { ids: (0..n).collect(), flags: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flipped_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// One line per sample: `id,flipped(0|1)`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (id, flag) in self.ids.iter().zip(&self.flags) {
            out.push_str(&format!("{},{}\n", id, u8::from(*flag)));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut ids = Vec::new();
        let mut flags = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, flag) = line
                .split_once(',')
                .ok_or_else(|| Error::format(format!("mask line {}: missing comma", line_no + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(format!("mask line {}: bad id '{id}'", line_no + 1)))?;
            let flag = match flag {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::format(format!(
                        "mask line {}: flag must be 0 or 1, got '{other}'",
                        line_no + 1
                    )))
                }
            };
            ids.push(id);
            flags.push(flag);
        }
        Ok(CorruptionMask { ids, flags })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_sample(id: usize, label: usize, dim: usize) -> LabeledSample {
        LabeledSample {
            id,
            input: SampleInput::Features(Array1::zeros(dim)),
            true_label: label,
            observed_label: label,
        }
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let err = LabeledDataset::new(
            "d",
            Split::Train,
            2,
            vec![feature_sample(0, 0, 4), feature_sample(0, 1, 4)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let err =
            LabeledDataset::new("d", Split::Train, 2, vec![feature_sample(0, 2, 4)]).unwrap_err();
        assert!(err.to_string().contains("label out of range"));
    }

    #[test]
    fn dataset_rejects_mixed_dims() {
        let err = LabeledDataset::new(
            "d",
            Split::Train,
            2,
            vec![feature_sample(0, 0, 4), feature_sample(1, 1, 5)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("dims"));
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = CorruptionMask { ids: vec![0, 1, 2], flags: vec![false, true, false] };
        let path = dir.path().join("mask.csv");
        mask.save(&path).unwrap();
        assert_eq!(CorruptionMask::load(&path).unwrap(), mask);
    }
}
