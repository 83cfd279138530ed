//! Packed binary dataset containers.
//!
//! Image variant: magic `NLAB1`, `u32` k, n, H, W, C, then `n` records of
//! `(u16 true_label, u16 observed_label, H·W·C u8 pixels)`. Cached-feature
//! variant: magic `NFEA1`, `u32` k, n, c, then `n` records of
//! `(u16, u16, c float32)`. All little-endian. Sample ids are positional
//! (record `i` gets id `i`); the loader names the dataset after the file
//! stem and tags it as a train split.

use super::{LabeledDataset, LabeledSample, SampleInput, Split};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array3};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC_IMAGE: &[u8; 5] = b"NLAB1";
const MAGIC_FEATURES: &[u8; 5] = b"NFEA1";

pub fn write_packed(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match dataset.samples.first().map(|s| &s.input) {
        Some(SampleInput::Image(_)) | None => write_image_variant(dataset, &mut w)?,
        Some(SampleInput::Features(_)) => write_feature_variant(dataset, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn write_image_variant(dataset: &LabeledDataset, w: &mut impl Write) -> Result<()> {
    let (h, wd, c) = dataset
        .image_shape()
        .ok_or_else(|| Error::data("cannot write empty dataset as image container"))?;
    w.write_all(MAGIC_IMAGE)?;
    w.write_u32::<LittleEndian>(dataset.class_count as u32)?;
    w.write_u32::<LittleEndian>(dataset.len() as u32)?;
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_u32::<LittleEndian>(wd as u32)?;
    w.write_u32::<LittleEndian>(c as u32)?;
    for s in &dataset.samples {
        w.write_u16::<LittleEndian>(s.true_label as u16)?;
        w.write_u16::<LittleEndian>(s.observed_label as u16)?;
        match &s.input {
            SampleInput::Image(img) => {
                for &v in img.iter() {
                    w.write_u8((v.clamp(0.0, 1.0) * 255.0).round() as u8)?;
                }
            }
            SampleInput::Features(_) => unreachable!("mode checked by caller"),
        }
    }
    Ok(())
}

fn write_feature_variant(dataset: &LabeledDataset, w: &mut impl Write) -> Result<()> {
    let dim = dataset
        .feature_dim()
        .ok_or_else(|| Error::data("cannot write empty dataset as feature container"))?;
    w.write_all(MAGIC_FEATURES)?;
    w.write_u32::<LittleEndian>(dataset.class_count as u32)?;
    w.write_u32::<LittleEndian>(dataset.len() as u32)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    for s in &dataset.samples {
        w.write_u16::<LittleEndian>(s.true_label as u16)?;
        w.write_u16::<LittleEndian>(s.observed_label as u16)?;
        match &s.input {
            SampleInput::Features(f) => {
                for &v in f.iter() {
                    w.write_f32::<LittleEndian>(v)?;
                }
            }
            SampleInput::Image(_) => unreachable!("mode checked by caller"),
        }
    }
    Ok(())
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(format!("truncated magic at offset 0: {e}")))?;
    match &magic {
        m if m == MAGIC_IMAGE => load_image_variant(&mut r, name),
        m if m == MAGIC_FEATURES => load_feature_variant(&mut r, name),
        m => Err(Error::format(format!(
            "bad magic {:?}: expected NLAB1 or NFEA1",
            String::from_utf8_lossy(m)
        ))),
    }
}

fn read_header(r: &mut impl Read, fields: &mut [u32]) -> Result<()> {
    for (i, f) in fields.iter_mut().enumerate() {
        *f = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::format(format!("truncated header field {i}: {e}")))?;
    }
    Ok(())
}

fn check_labels(k: u32, t: u16, o: u16, record: usize) -> Result<()> {
    if u32::from(t) >= k {
        return Err(Error::format(format!(
            "record {record}: true label {t} out of range (k={k})"
        )));
    }
    if u32::from(o) >= k {
        return Err(Error::format(format!(
            "record {record}: observed label {o} out of range (k={k})"
        )));
    }
    Ok(())
}

fn load_image_variant(r: &mut impl Read, name: String) -> Result<LabeledDataset> {
    let mut header = [0u32; 5];
    read_header(r, &mut header)?;
    let [k, n, h, w, c] = header;
    let pixels = (h * w * c) as usize;
    let mut samples = Vec::with_capacity(n as usize);
    let mut buf = vec![0u8; pixels];
    for i in 0..n as usize {
        let t = r
            .read_u16::<LittleEndian>()
            .map_err(|e| Error::format(format!("record {i}: truncated true label: {e}")))?;
        let o = r
            .read_u16::<LittleEndian>()
            .map_err(|e| Error::format(format!("record {i}: truncated observed label: {e}")))?;
        check_labels(k, t, o, i)?;
        r.read_exact(&mut buf)
            .map_err(|e| Error::format(format!("record {i}: truncated pixel payload: {e}")))?;
        let img = Array3::from_shape_vec(
            (h as usize, w as usize, c as usize),
            buf.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
        .expect("shape matches buffer");
        samples.push(LabeledSample {
            id: i,
            input: SampleInput::Image(img),
            true_label: t as usize,
            observed_label: o as usize,
        });
    }
    LabeledDataset::new(name, Split::Train, k as usize, samples)
}

fn load_feature_variant(r: &mut impl Read, name: String) -> Result<LabeledDataset> {
    let mut header = [0u32; 3];
    read_header(r, &mut header)?;
    let [k, n, dim] = header;
    let mut samples = Vec::with_capacity(n as usize);
    let mut buf = vec![0f32; dim as usize];
    for i in 0..n as usize {
        let t = r
            .read_u16::<LittleEndian>()
            .map_err(|e| Error::format(format!("record {i}: truncated true label: {e}")))?;
        let o = r
            .read_u16::<LittleEndian>()
            .map_err(|e| Error::format(format!("record {i}: truncated observed label: {e}")))?;
        check_labels(k, t, o, i)?;
        r.read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|e| Error::format(format!("record {i}: truncated feature payload: {e}")))?;
        samples.push(LabeledSample {
            id: i,
            input: SampleInput::Features(Array1::from_vec(buf.clone())),
            true_label: t as usize,
            observed_label: o as usize,
        });
    }
    LabeledDataset::new(name, Split::Train, k as usize, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;

    fn tiny_image_dataset(name: &str) -> LabeledDataset {
        let mut samples = Vec::new();
        for i in 0..2 {
            let img = Array3::from_shape_fn((28, 28, 3), |(y, x, ch)| {
                ((y * 31 + x * 7 + ch + i * 13) % 256) as f32 / 255.0
            });
            samples.push(LabeledSample {
                id: i,
                input: SampleInput::Image(img),
                true_label: i % 8,
                observed_label: (i + 1) % 8,
            });
        }
        LabeledDataset::new(name, Split::Train, 8, samples).unwrap()
    }

    #[test]
    fn header_and_records_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.nlab");
        let ds = tiny_image_dataset("tiny");
        write_packed(&ds, &path).unwrap();
        let back = load_packed(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.class_count, 8);
        // Pixels quantize to the u8 grid on write; this dataset was built on
        // the grid, so the round-trip is exact in every field.
        assert_eq!(ds, back);
    }

    #[test]
    fn feature_variant_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.nfea");
        let samples = (0..5)
            .map(|i| LabeledSample {
                id: i,
                input: SampleInput::Features(Array1::from_shape_fn(6, |j| {
                    (i * 6 + j) as f32 * 0.37 - 1.0
                })),
                true_label: i % 3,
                observed_label: (i + 1) % 3,
            })
            .collect();
        let ds = LabeledDataset::new("feat", Split::Train, 3, samples).unwrap();
        write_packed(&ds, &path).unwrap();
        assert_eq!(load_packed(&path).unwrap(), ds);
    }

    #[test]
    fn out_of_range_label_is_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nlab");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"NLAB1");
        for v in [8u32, 1, 1, 1, 1] {
            buf.write_u32::<LittleEndian>(v).unwrap();
        }
        buf.write_u16::<LittleEndian>(8).unwrap(); // label == k
        buf.write_u16::<LittleEndian>(0).unwrap();
        buf.push(0);
        std::fs::write(&path, &buf).unwrap();
        let err = load_packed(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label 8 out of range") && msg.contains("record 0"), "{msg}");
    }

    #[test]
    fn truncated_payload_is_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.nlab");
        let ds = tiny_image_dataset("trunc");
        write_packed(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_packed(&path).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"JUNK!whatever").unwrap();
        let err = load_packed(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }
}
