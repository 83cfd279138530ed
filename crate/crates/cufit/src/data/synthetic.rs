//! Synthetic Gaussian-cluster datasets.
//!
//! One unit-variance Gaussian cluster per class, with centroids placed along
//! orthonormal directions scaled so every centroid pair is exactly
//! `cluster_sep` apart. Samples are emitted either as raw feature vectors or
//! tiled into images (pixel values mapped into `[0,1]` and quantized to the
//! u8 grid so packed round-trips are exact). Train and test splits share
//! centroids but draw from independent seeded streams.

use super::{LabeledDataset, LabeledSample, SampleInput, Split};
use crate::error::{Error, Result};
use crate::seeding::derived_rng;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticShape {
    Features { dim: usize },
    Images { height: usize, width: usize, channels: usize },
}

impl SyntheticShape {
    pub fn dim(&self) -> usize {
        match self {
            SyntheticShape::Features { dim } => *dim,
            SyntheticShape::Images { height, width, channels } => height * width * channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub shape: SyntheticShape,
    pub cluster_sep: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self, split: Split) -> Result<LabeledDataset> {
        self.generate_sized(split, self.per_class)
    }

    /// Generate a split with an explicit per-class size (test splits are
    /// often smaller than train splits).
    pub fn generate_sized(&self, split: Split, per_class: usize) -> Result<LabeledDataset> {
        let k = self.class_count;
        let dim = self.shape.dim();
        if per_class == 0 {
            return Err(Error::config("per-class sample count must be positive"));
        }
        if self.cluster_sep <= 0.0 {
            return Err(Error::config(format!(
                "cluster_sep must be positive, got {}",
                self.cluster_sep
            )));
        }
        if k < 2 {
            return Err(Error::config(format!("class_count must be >= 2, got {k}")));
        }
        if dim < k {
            return Err(Error::config(format!(
                "input dimension {dim} must be >= class_count {k} for orthogonal centroids"
            )));
        }
        let centroids = self.centroids();
        let tag = match split {
            Split::Train => "synthetic-train",
            Split::Test => "synthetic-test",
        };
        let mut rng = derived_rng(self.seed, tag, 0);
        let mut samples = Vec::with_capacity(k * per_class);
        for class in 0..k {
            for i in 0..per_class {
                let mut values = Array1::<f64>::zeros(dim);
                for j in 0..dim {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    values[j] = centroids[(class, j)] + noise;
                }
                let id = class * per_class + i;
                samples.push(LabeledSample {
                    id,
                    input: self.render(&values),
                    true_label: class,
                    observed_label: class,
                });
            }
        }
        LabeledDataset::new(format!("synthetic-k{k}"), split, k, samples)
    }

    /// Class centroids: seeded Gaussian directions orthonormalized by
    /// Gram-Schmidt, scaled by `cluster_sep / sqrt(2)` so pairwise distances
    /// equal `cluster_sep` exactly.
    pub fn centroids(&self) -> Array2<f64> {
        let k = self.class_count;
        let dim = self.shape.dim();
        let mut rng = derived_rng(self.seed, "synthetic-centroids", 0);
        let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v = Array1::from_shape_fn(dim, |_| {
                let draw: f64 = StandardNormal.sample(&mut rng);
                draw
            });
            for b in &basis {
                let proj = v.dot(b);
                v = &v - &(b * proj);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                basis.push(v / norm);
            }
        }
        let scale = self.cluster_sep / std::f64::consts::SQRT_2;
        let mut out = Array2::zeros((k, dim));
        for (c, b) in basis.iter().enumerate() {
            out.row_mut(c).assign(&(b * scale));
        }
        out
    }

    /// The affine map used to tile feature values into `[0,1]` pixels.
    /// Covers the centroid extent plus a 4-sigma noise tail.
    pub fn pixel_span(&self) -> f64 {
        self.cluster_sep / std::f64::consts::SQRT_2 + 4.0
    }

    fn render(&self, values: &Array1<f64>) -> SampleInput {
        match self.shape {
            SyntheticShape::Features { .. } => {
                SampleInput::Features(values.mapv(|v| v as f32))
            }
            SyntheticShape::Images { height, width, channels } => {
                let span = self.pixel_span();
                let img = Array3::from_shape_fn((height, width, channels), |(y, x, c)| {
                    let v = values[(y * width + x) * channels + c];
                    let unit = (0.5 + v / (2.0 * span)).clamp(0.0, 1.0);
                    // quantize to the u8 grid used by the packed container
                    (unit * 255.0).round() as f32 / 255.0
                });
                SampleInput::Image(img)
            }
        }
    }
}

/// Feature-vector synthetic dataset (train split).
pub fn make_synthetic(
    class_count: usize,
    per_class: usize,
    dim: usize,
    cluster_sep: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    SyntheticSpec {
        class_count,
        per_class,
        shape: SyntheticShape::Features { dim },
        cluster_sep,
        seed,
    }
    .generate(Split::Train)
}
