//! Named-tensor checkpoint container.
//!
//! Little-endian binary layout: magic `VITW1`, `u32` tensor count, then per
//! tensor `u16` name length, name bytes, `u8` rank, `u32` dims, `float32`
//! data in row-major order. The same container carries backbone weights,
//! adapter stacks, and training state.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"VITW1";

/// One named tensor: shape plus row-major `f32` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let entry = TensorEntry { name: name.into(), dims, data };
        assert_eq!(
            entry.dims.iter().product::<usize>(),
            entry.data.len(),
            "tensor payload does not match dims"
        );
        entry
    }

    pub fn from_iter<T: Scalar>(
        name: impl Into<String>,
        dims: Vec<usize>,
        values: impl Iterator<Item = T>,
    ) -> Self {
        Self::new(name, dims, values.map(|v| v.to_f32()).collect())
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TensorEntry) {
        self.tensors.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Look up a tensor and check its shape, with errors naming the tensor.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&TensorEntry> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor '{name}'")))?;
        if entry.dims != dims {
            return Err(Error::Shape(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                entry.dims, dims
            )));
        }
        Ok(entry)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            if t.name.len() > u16::MAX as usize {
                return Err(Error::format(format!("tensor name too long: {}", t.name.len())));
            }
            w.write_u16::<LittleEndian>(t.name.len() as u16)?;
            w.write_all(t.name.as_bytes())?;
            w.write_u8(t.dims.len() as u8)?;
            for &d in &t.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|e| Error::format(format!("truncated magic at offset 0: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::format(format!("truncated tensor count: {e}")))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let name_len = r
                .read_u16::<LittleEndian>()
                .map_err(|e| Error::format(format!("tensor {i}: truncated name length: {e}")))?;
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name)
                .map_err(|e| Error::format(format!("tensor {i}: truncated name: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format(format!("tensor {i}: name is not UTF-8")))?;
            let rank = r
                .read_u8()
                .map_err(|e| Error::format(format!("tensor '{name}': truncated rank: {e}")))?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>().map_err(|e| {
                    Error::format(format!("tensor '{name}': truncated dims: {e}"))
                })? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data)
                .map_err(|e| Error::format(format!("tensor '{name}': truncated payload: {e}")))?;
            tensors.push(TensorEntry { name, dims, data });
        }
        Ok(TensorContainer { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Self::read_from(r)
    }
}
