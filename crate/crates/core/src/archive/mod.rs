//! Binary tensor archive.
//!
//! ```text
//! "DSEE" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is `{"tensors": {name: {"dtype", "shape", "offset"}}, "meta": {..}}`,
//! padded with spaces so that the payload starts on a 64-byte boundary.
//! Offsets are relative to the payload start and 64-byte aligned; tensors are
//! laid out in name order with zero padding between them. Writing is
//! canonical, so `write(read(bytes)) == bytes` for any archive this module
//! produced.

mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{merged_model, model_from_archive, model_to_archive};

pub const MAGIC: &[u8; 4] = b"DSEE";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
pub const MAX_NAME_BYTES: usize = 256;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    /// Raw little-endian bytes; the length must equal `product(shape) · dtype size`.
    pub fn from_bytes(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let want = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
        if data.len() != want {
            return Err(Error::shape(format!(
                "{} bytes for shape {shape:?} of {dtype:?}, expected {want}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Self::from_bytes(
            Dtype::F32,
            shape,
            values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        )
    }

    pub fn from_i64(shape: Vec<usize>, values: &[i64]) -> Result<Self> {
        Self::from_bytes(
            Dtype::I64,
            shape,
            values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        )
    }

    pub fn from_u8(shape: Vec<usize>, values: &[u8]) -> Result<Self> {
        Self::from_bytes(Dtype::U8, shape, values.to_vec())
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    fn expect(&self, dtype: Dtype) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Format(format!(
                "expected {dtype:?} tensor, found {:?}",
                self.dtype
            )));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        self.expect(Dtype::F32)?;
        Ok(self
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        self.expect(Dtype::I64)?;
        Ok(self
            .data
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn to_u8(&self) -> Result<Vec<u8>> {
        self.expect(Dtype::U8)?;
        Ok(self.data.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: BTreeMap<String, Entry>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > MAX_NAME_BYTES {
        return Err(Error::param(format!(
            "tensor name must be 1..={MAX_NAME_BYTES} bytes, got {}",
            name.len()
        )));
    }
    Ok(())
}

fn truncated(what: &str) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("archive truncated: {what}"),
    ))
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        check_name(&name)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Like [`get`](Self::get) but a missing tensor is a format error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                Entry {
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset: offset as u64,
                },
            );
            offset = align_up(offset + t.data.len());
        }
        let header = Header {
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut json = serde_json::to_vec(&header)?;
        let padded = align_up(PREAMBLE + json.len()) - PREAMBLE;
        json.resize(padded, b' ');

        let mut out = Vec::with_capacity(PREAMBLE + padded + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(padded as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for t in self.tensors.values() {
            let at = align_up(out.len() - payload_start) + payload_start;
            out.resize(at, 0);
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(truncated("preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = (bytes.len() - PREAMBLE) as u64;
        if header_len > rest {
            return Err(Error::Corrupt(format!(
                "header length {header_len} exceeds the {rest} bytes after the preamble"
            )));
        }
        let header_end = PREAMBLE + header_len as usize;
        if !header_end.is_multiple_of(ALIGN) {
            return Err(Error::Corrupt(format!(
                "payload start {header_end} is not {ALIGN}-byte aligned"
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let payload = &bytes[header_end..];

        let mut layout: Vec<(u64, &String, &Entry)> = header
            .tensors
            .iter()
            .map(|(n, e)| (e.offset, n, e))
            .collect();
        layout.sort_by_key(|x| x.0);
        let mut end = 0u64;
        let mut archive = TensorArchive {
            tensors: BTreeMap::new(),
            meta: header.meta.clone(),
        };
        for (offset, name, entry) in layout {
            check_name(name).map_err(|e| Error::Corrupt(e.to_string()))?;
            if offset % ALIGN as u64 != 0 {
                return Err(Error::Corrupt(format!(
                    "tensor {name:?} offset {offset} is misaligned"
                )));
            }
            if offset < end {
                return Err(Error::Corrupt(format!(
                    "tensor {name:?} overlaps its predecessor"
                )));
            }
            let len = entry
                .shape
                .iter()
                .try_fold(entry.dtype.size() as u64, |acc, &d| {
                    acc.checked_mul(d as u64)
                })
                .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} shape overflows")))?;
            let stop = offset
                .checked_add(len)
                .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} extent overflows")))?;
            if stop > payload.len() as u64 {
                return Err(truncated(&format!(
                    "tensor {name:?} ends at {stop}, payload has {}",
                    payload.len()
                )));
            }
            let data = payload[offset as usize..stop as usize].to_vec();
            archive.tensors.insert(
                name.clone(),
                Tensor::from_bytes(entry.dtype, entry.shape.clone(), data)?,
            );
            end = stop;
        }
        if payload.len() as u64 != end {
            return Err(Error::Corrupt(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - end
            )));
        }
        if archive.to_bytes()? != bytes {
            return Err(Error::Corrupt("non-canonical layout".into()));
        }
        Ok(archive)
    }

    /// Atomic write: temporary file in the target directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes `bytes` to `path` via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
