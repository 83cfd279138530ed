//! Image-folder ingestion driven by a `path,label` manifest CSV.

use super::{LabeledDataset, LabeledSample, SampleInput, Split};
use crate::error::{Error, Result};
use image::imageops::FilterType;
use ndarray::Array3;
use std::collections::HashSet;
use std::path::Path;

/// Load images listed in a manifest CSV (`path,label` header, UTF-8), resize
/// them with bilinear interpolation to `(height, width)` and scale pixels to
/// `[0,1]`. `channels` must be 1 (grayscale) or 3 (RGB).
pub fn load_image_folder(
    root: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
    target: (usize, usize),
    channels: usize,
) -> Result<LabeledDataset> {
    let root = root.as_ref();
    if channels != 1 && channels != 3 {
        return Err(Error::config(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest_path.as_ref())
        .map_err(|e| Error::format(format!("manifest: {e}")))?;
    {
        let headers = reader.headers().map_err(|e| Error::format(format!("manifest: {e}")))?;
        if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "label" {
            return Err(Error::format(format!(
                "manifest header must be 'path,label', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    let (height, width) = target;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("manifest row {}: {e}", row + 1)))?;
        let rel = record
            .get(0)
            .ok_or_else(|| Error::format(format!("manifest row {}: missing path", row + 1)))?
            .to_string();
        let label: usize = record
            .get(1)
            .ok_or_else(|| Error::format(format!("manifest row {}: missing label", row + 1)))?
            .trim()
            .parse()
            .map_err(|_| {
                Error::format(format!("manifest row {}: label is not an integer", row + 1))
            })?;
        if !seen.insert(rel.clone()) {
            return Err(Error::data(format!("duplicate manifest path '{rel}'")));
        }
        let full = root.join(&rel);
        if !full.exists() {
            return Err(Error::data(format!("manifest references missing file '{rel}'")));
        }
        let img = image::open(&full)
            .map_err(|e| Error::data(format!("cannot decode image '{rel}': {e}")))?;
        let resized = img.resize_exact(width as u32, height as u32, FilterType::Triangle);
        let tensor = match channels {
            1 => {
                let gray = resized.to_luma8();
                Array3::from_shape_fn((height, width, 1), |(y, x, _)| {
                    f32::from(gray.get_pixel(x as u32, y as u32)[0]) / 255.0
                })
            }
            _ => {
                let rgb = resized.to_rgb8();
                Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
                    f32::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
                })
            }
        };
        max_label = max_label.max(label);
        samples.push(LabeledSample {
            id: samples.len(),
            input: SampleInput::Image(tensor),
            true_label: label,
            observed_label: label,
        });
    }
    if samples.is_empty() {
        return Err(Error::data("manifest lists no images"));
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image-folder".to_string());
    LabeledDataset::new(name, Split::Train, (max_label + 1).max(2), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_png(path: &Path, w: u32, h: u32, color: [u8; 3]) {
        let img = RgbImage::from_pixel(w, h, Rgb(color));
        img.save(path).unwrap();
    }

    #[test]
    fn loads_manifest_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 10, 12, [255, 0, 0]);
        write_png(&dir.path().join("b.png"), 6, 6, [0, 255, 0]);
        write_png(&dir.path().join("c.png"), 9, 3, [0, 0, 255]);
        std::fs::write(dir.path().join("manifest.csv"), "path,label\na.png,0\nb.png,1\nc.png,1\n")
            .unwrap();
        let ds =
            load_image_folder(dir.path(), dir.path().join("manifest.csv"), (8, 8), 3).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.image_shape(), Some((8, 8, 3)));
        assert_eq!(ds.observed_labels(), vec![0, 1, 1]);
    }

    /// Bilinear resize of a constant image stays constant.
    #[test]
    fn constant_image_resizes_to_constant() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("flat.png"), 11, 7, [100, 100, 100]);
        std::fs::write(dir.path().join("manifest.csv"), "path,label\nflat.png,0\nflat2.png,1\n")
            .unwrap();
        write_png(&dir.path().join("flat2.png"), 5, 5, [100, 100, 100]);
        let ds =
            load_image_folder(dir.path(), dir.path().join("manifest.csv"), (4, 4), 3).unwrap();
        for s in &ds.samples {
            if let SampleInput::Image(img) = &s.input {
                let expect = 100.0 / 255.0;
                for &v in img.iter() {
                    assert!((v - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.csv"), "path,label\nghost.png,0\n").unwrap();
        let err = load_image_folder(dir.path(), dir.path().join("manifest.csv"), (4, 4), 3)
            .unwrap_err();
        assert!(err.to_string().contains("ghost.png"), "{err}");
    }

    #[test]
    fn duplicate_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 4, 4, [1, 2, 3]);
        std::fs::write(dir.path().join("manifest.csv"), "path,label\na.png,0\na.png,1\n").unwrap();
        let err = load_image_folder(dir.path(), dir.path().join("manifest.csv"), (4, 4), 3)
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.csv"), "file,class\na.png,0\n").unwrap();
        let err = load_image_folder(dir.path(), dir.path().join("manifest.csv"), (4, 4), 3)
            .unwrap_err();
        assert!(err.to_string().contains("path,label"), "{err}");
    }
}
