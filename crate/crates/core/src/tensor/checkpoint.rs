//! Tensor container file.
//!
//! Layout: one UTF-8 JSON line holding the ordered manifest
//! `[{"name", "shape", "dtype"}, ...]`, a `\n`, then the raw little-endian
//! payload of every tensor concatenated in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// A tensor of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when the stored dtype is `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// One named tensor in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: AnyTensor,
}

impl Entry {
    pub fn new<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor: AnyTensor::from_tensor(t),
        }
    }
}

pub fn write_container<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    let manifest: Vec<ManifestEntry> = entries
        .iter()
        .map(|e| ManifestEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            dtype: e.tensor.dtype(),
        })
        .collect();
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::new();
    for e in entries {
        buf.clear();
        e.tensor.write_payload(&mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_payload<T: Scalar>(bytes: &[u8], shape: Vec<usize>) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_container<R: Read>(r: R) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    BufReader::new(r).read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("container has no manifest line".into()))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    let mut offset = nl + 1;
    let mut entries = Vec::with_capacity(manifest.len());
    for m in manifest {
        let len = m.shape.iter().product::<usize>() * m.dtype.size();
        let chunk = bytes.get(offset..offset + len).ok_or_else(|| {
            Error::Format(format!("payload of `{}` is truncated", m.name))
        })?;
        offset += len;
        let tensor = match m.dtype {
            DType::F32 => AnyTensor::F32(read_payload(chunk, m.shape)?),
            DType::F64 => AnyTensor::F64(read_payload(chunk, m.shape)?),
        };
        entries.push(Entry { name: m.name, tensor });
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last payload",
            bytes.len() - offset
        )));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    write_container(BufWriter::new(File::create(path)?), entries)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    read_container(File::open(path)?)
}
