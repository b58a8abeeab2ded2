//! Neutral tensor-archive format.
//!
//! Layout: a little-endian `u32` header length, a UTF-8 JSON descriptor,
//! then the raw row-major little-endian payloads in descriptor order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name}: payload truncated ({got} of {expected} bytes)")]
    TruncatedPayload {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("tensor {name}: invalid shape {rows}x{cols}")]
    BadShape { name: String, rows: u32, cols: u32 },
    #[error("{0} trailing bytes after the last payload")]
    TrailingBytes(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

/// One `D x C` weight tensor, held as f32 regardless of storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub layer: u32,
    /// Weights per output channel (`D`).
    pub rows: u32,
    /// Output channels (`C`).
    pub cols: u32,
    pub dtype: DType,
    /// Row-major values, length `rows * cols`.
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<ArchiveTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    version: u32,
    tensors: Vec<TensorDescJson>,
}

#[derive(Serialize, Deserialize)]
struct TensorDescJson {
    name: String,
    layer: u32,
    rows: u32,
    cols: u32,
    dtype: DType,
}

impl TensorArchive {
    pub fn new(tensors: Vec<ArchiveTensor>) -> Result<Self, ArchiveError> {
        let mut seen = BTreeSet::new();
        for t in &tensors {
            if t.rows == 0 || t.cols == 0 {
                return Err(ArchiveError::BadShape {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                });
            }
            if !seen.insert(t.name.clone()) {
                return Err(ArchiveError::DuplicateName(t.name.clone()));
            }
            let expected = t.rows as usize * t.cols as usize;
            if t.data.len() != expected {
                return Err(ArchiveError::TruncatedPayload {
                    name: t.name.clone(),
                    expected: expected * t.dtype.size(),
                    got: t.data.len() * t.dtype.size(),
                });
            }
        }
        Ok(Self { tensors })
    }

    /// Map from layer id to the names of its tensors, in archive order.
    pub fn layer_index(&self) -> BTreeMap<u32, Vec<String>> {
        let mut map: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for t in &self.tensors {
            map.entry(t.layer).or_default().push(t.name.clone());
        }
        map
    }

    pub fn tensor(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Writes the archive; returns the file size in bytes.
    pub fn write(&self, path: &Path) -> Result<u64, ArchiveError> {
        let header = HeaderJson {
            version: ARCHIVE_VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorDescJson {
                    name: t.name.clone(),
                    layer: t.layer,
                    rows: t.rows,
                    cols: t.cols,
                    dtype: t.dtype,
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;

        let mut w = BufWriter::new(File::create(path)?);
        let mut written = 0u64;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        written += 4 + header_bytes.len() as u64;
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                DType::F16 => {
                    for &v in &t.data {
                        w.write_all(&half::f16::from_f32(v).to_le_bytes())?;
                    }
                }
            }
            written += (t.data.len() * t.dtype.size()) as u64;
        }
        w.flush()?;
        Ok(written)
    }
}

/// Parses a tensor archive, validating shapes, unique names and payload
/// lengths.
pub fn read_tensor_archive(path: &Path) -> Result<TensorArchive, ArchiveError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)
        .map_err(|_| ArchiveError::MalformedHeader("missing header length".into()))?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| ArchiveError::MalformedHeader("header shorter than declared".into()))?;
    let header: HeaderJson = serde_json::from_slice(&header_bytes)
        .map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
    if header.version != ARCHIVE_VERSION {
        return Err(ArchiveError::UnsupportedVersion(header.version));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for d in header.tensors {
        if d.rows == 0 || d.cols == 0 {
            return Err(ArchiveError::BadShape {
                name: d.name,
                rows: d.rows,
                cols: d.cols,
            });
        }
        let count = d.rows as usize * d.cols as usize;
        let byte_len = count * d.dtype.size();
        let mut payload = vec![0u8; byte_len];
        let mut got = 0;
        while got < byte_len {
            let n = r.read(&mut payload[got..])?;
            if n == 0 {
                return Err(ArchiveError::TruncatedPayload {
                    name: d.name,
                    expected: byte_len,
                    got,
                });
            }
            got += n;
        }
        let data: Vec<f32> = match d.dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F16 => payload
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        tensors.push(ArchiveTensor {
            name: d.name,
            layer: d.layer,
            rows: d.rows,
            cols: d.cols,
            dtype: d.dtype,
            data,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        let extra = 1 + std::io::copy(&mut r, &mut std::io::sink())?;
        return Err(ArchiveError::TrailingBytes(extra));
    }

    TensorArchive::new(tensors)
}
