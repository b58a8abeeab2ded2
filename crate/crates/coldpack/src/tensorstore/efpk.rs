//! EFPK: the packed-model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "EFPK" | version u32 | register_width u32 | tensor_count u32
//! descriptor table (one per tensor, sorted by ascending layer id):
//!   name_len u16 | name | layer u32 | rows u32 | cols u32 | padded_rows u32
//!   flags u8 (bit0 smoothing, bit1 activation scale)
//!   activation_scale f32 | alpha f32 | beta f32
//!   metadata_off u32 | metadata_len u32
//!   scales_off u32   | scales_len u32
//!   smoothing_off u32| smoothing_len u32
//!   blocks_off u32   | blocks_len u32
//!   blocks_crc32 u32
//! data sections, contiguous and in descriptor order:
//!   metadata (INT3 bit-width codes) | scales (C x f32)
//!   | smoothing (D x f32 input, C x f32 output, when flagged)
//!   | blocks (weightlet block bytes)
//! ```
//!
//! Section offsets are absolute. The per-tensor CRC32 over the block
//! bytes catches truncation during streaming reads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pack::{
    decode_bitwidth_metadata, metadata_len, validate_register_width, PackError, PackedTensor,
    QuantizedPackedModel, TensorSmoothing,
};

pub const EFPK_MAGIC: [u8; 4] = *b"EFPK";
pub const EFPK_VERSION: u32 = 1;

const FLAG_SMOOTHING: u8 = 1;
const FLAG_ACTIVATION_SCALE: u8 = 2;

#[derive(Debug, Error)]
pub enum EfpkError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an EFPK file (bad magic)")]
    BadMagic,
    #[error("unsupported EFPK version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("descriptor overflow: {0}")]
    DescriptorOverflow(String),
    #[error("descriptor {index} ({name:?}): layer {layer} after layer {previous}")]
    OutOfOrderDescriptor {
        index: usize,
        name: String,
        layer: u32,
        previous: u32,
    },
    #[error("corrupt layout: {0}")]
    CorruptLayout(String),
    #[error("tensor {name}: block checksum mismatch (expected {expected:08x}, got {got:08x})")]
    ChecksumMismatch { name: String, expected: u32, got: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(String),
}

/// Parsed per-tensor descriptor: section offsets plus shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EfpkTensorDesc {
    pub name: String,
    pub layer: u32,
    pub rows: u32,
    pub cols: u32,
    pub padded_rows: u32,
    pub activation_scale: Option<f32>,
    pub smoothing_alpha_beta: Option<(f32, f32)>,
    pub metadata_off: u32,
    pub metadata_len: u32,
    pub scales_off: u32,
    pub scales_len: u32,
    pub smoothing_off: u32,
    pub smoothing_len: u32,
    pub blocks_off: u32,
    pub blocks_len: u32,
    pub blocks_crc32: u32,
}

impl EfpkTensorDesc {
    /// Total section bytes this tensor occupies.
    fn section_len(&self) -> u64 {
        self.metadata_len as u64
            + self.scales_len as u64
            + self.smoothing_len as u64
            + self.blocks_len as u64
    }
}

/// Writes a packed model; returns the file size in bytes.
///
/// Tensors are sorted by ascending layer id (stable within a layer) so
/// the streaming reader can hand out whole layers sequentially.
pub fn write_efpk(model: &QuantizedPackedModel, path: &Path) -> Result<u64, EfpkError> {
    model.validate()?;
    if model.tensors.len() as u64 > u32::MAX as u64 {
        return Err(EfpkError::DescriptorOverflow(format!(
            "{} tensors",
            model.tensors.len()
        )));
    }
    let mut order: Vec<&PackedTensor> = model.tensors.iter().collect();
    order.sort_by_key(|t| t.layer);

    // Descriptor table size must be known before offsets can be assigned.
    let mut table_len = 0u64;
    for t in &order {
        if t.name.len() > u16::MAX as usize {
            return Err(EfpkError::DescriptorOverflow(format!(
                "tensor name {} bytes",
                t.name.len()
            )));
        }
        table_len += 2 + t.name.len() as u64 + 4 * 4 + 1 + 4 * 3 + 4 * 8 + 4;
    }

    let mut cursor = 16u64 + table_len;
    let mut descs = Vec::with_capacity(order.len());
    for t in &order {
        let metadata_off = cursor;
        let metadata_len = t.metadata.len() as u64;
        let scales_off = metadata_off + metadata_len;
        let scales_len = 4 * t.scales.len() as u64;
        let (smoothing_off, smoothing_len) = match &t.smoothing {
            Some(s) => (
                scales_off + scales_len,
                4 * (s.input.len() + s.output.len()) as u64,
            ),
            None => (0, 0),
        };
        let blocks_off = scales_off + scales_len + smoothing_len;
        let blocks_len = t.blocks.len() as u64;
        cursor = blocks_off + blocks_len;
        if cursor > u32::MAX as u64 {
            return Err(EfpkError::DescriptorOverflow(format!(
                "file size {cursor} exceeds the 32-bit offset space"
            )));
        }
        descs.push(EfpkTensorDesc {
            name: t.name.clone(),
            layer: t.layer,
            rows: t.rows,
            cols: t.cols,
            padded_rows: t.padded_rows,
            activation_scale: t.activation_scale,
            smoothing_alpha_beta: t.smoothing.as_ref().map(|s| (s.alpha, s.beta)),
            metadata_off: metadata_off as u32,
            metadata_len: metadata_len as u32,
            scales_off: scales_off as u32,
            scales_len: scales_len as u32,
            smoothing_off: smoothing_off as u32,
            smoothing_len: smoothing_len as u32,
            blocks_off: blocks_off as u32,
            blocks_len: blocks_len as u32,
            blocks_crc32: crc32fast::hash(&t.blocks),
        });
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&EFPK_MAGIC)?;
    w.write_all(&EFPK_VERSION.to_le_bytes())?;
    w.write_all(&model.register_width.to_le_bytes())?;
    w.write_all(&(order.len() as u32).to_le_bytes())?;
    for (t, d) in order.iter().zip(&descs) {
        w.write_all(&(t.name.len() as u16).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&d.layer.to_le_bytes())?;
        w.write_all(&d.rows.to_le_bytes())?;
        w.write_all(&d.cols.to_le_bytes())?;
        w.write_all(&d.padded_rows.to_le_bytes())?;
        let mut flags = 0u8;
        if t.smoothing.is_some() {
            flags |= FLAG_SMOOTHING;
        }
        if t.activation_scale.is_some() {
            flags |= FLAG_ACTIVATION_SCALE;
        }
        w.write_all(&[flags])?;
        w.write_all(&t.activation_scale.unwrap_or(0.0).to_le_bytes())?;
        let (alpha, beta) = t.smoothing.as_ref().map_or((0.0, 0.0), |s| (s.alpha, s.beta));
        w.write_all(&alpha.to_le_bytes())?;
        w.write_all(&beta.to_le_bytes())?;
        for v in [
            d.metadata_off,
            d.metadata_len,
            d.scales_off,
            d.scales_len,
            d.smoothing_off,
            d.smoothing_len,
            d.blocks_off,
            d.blocks_len,
            d.blocks_crc32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for t in &order {
        w.write_all(&t.metadata)?;
        for &s in &t.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        if let Some(s) = &t.smoothing {
            for &v in s.input.iter().chain(&s.output) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&t.blocks)?;
    }
    w.flush()?;
    Ok(cursor)
}

/// Header and descriptor table of an EFPK file; immutable after open and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct EfpkReader {
    path: PathBuf,
    pub register_width: u32,
    pub descriptors: Vec<EfpkTensorDesc>,
    pub file_len: u64,
    pub data_start: u64,
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16, EfpkError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| EfpkError::Truncated(what.to_string()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, EfpkError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| EfpkError::Truncated(what.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, what: &str) -> Result<f32, EfpkError> {
    Ok(f32::from_bits(read_u32(r, what)?))
}

fn read_vec(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>, EfpkError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| EfpkError::Truncated(what.to_string()))?;
    Ok(buf)
}

impl EfpkReader {
    /// Parses the header and validates the descriptor geometry: ascending
    /// layer ids and contiguous, non-overlapping sections covering the
    /// file exactly.
    pub fn open(path: &Path) -> Result<Self, EfpkError> {
        let file_len = std::fs::metadata(path)?.len();
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| EfpkError::Truncated("magic".into()))?;
        if magic != EFPK_MAGIC {
            return Err(EfpkError::BadMagic);
        }
        let version = read_u32(&mut r, "version")?;
        if version != EFPK_VERSION {
            return Err(EfpkError::UnsupportedVersion(version));
        }
        let register_width = read_u32(&mut r, "register width")?;
        validate_register_width(register_width)?;
        let tensor_count = read_u32(&mut r, "tensor count")? as usize;

        let mut descriptors = Vec::with_capacity(tensor_count);
        let mut pos = 16u64;
        for i in 0..tensor_count {
            let name_len = read_u16(&mut r, "descriptor name length")? as usize;
            let name_bytes = read_vec(&mut r, name_len, "descriptor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| EfpkError::CorruptLayout(format!("descriptor {i}: name not UTF-8")))?;
            let layer = read_u32(&mut r, "layer")?;
            let rows = read_u32(&mut r, "rows")?;
            let cols = read_u32(&mut r, "cols")?;
            let padded_rows = read_u32(&mut r, "padded rows")?;
            let mut flags = [0u8; 1];
            r.read_exact(&mut flags)
                .map_err(|_| EfpkError::Truncated("flags".into()))?;
            let activation_scale = read_f32(&mut r, "activation scale")?;
            let alpha = read_f32(&mut r, "alpha")?;
            let beta = read_f32(&mut r, "beta")?;
            let mut vals = [0u32; 9];
            for v in &mut vals {
                *v = read_u32(&mut r, "descriptor offsets")?;
            }
            pos += 2 + name_len as u64 + 4 * 4 + 1 + 4 * 3 + 4 * 9;
            descriptors.push(EfpkTensorDesc {
                name,
                layer,
                rows,
                cols,
                padded_rows,
                activation_scale: (flags[0] & FLAG_ACTIVATION_SCALE != 0)
                    .then_some(activation_scale),
                smoothing_alpha_beta: (flags[0] & FLAG_SMOOTHING != 0).then_some((alpha, beta)),
                metadata_off: vals[0],
                metadata_len: vals[1],
                scales_off: vals[2],
                scales_len: vals[3],
                smoothing_off: vals[4],
                smoothing_len: vals[5],
                blocks_off: vals[6],
                blocks_len: vals[7],
                blocks_crc32: vals[8],
            });
        }

        let data_start = pos;
        let mut cursor = data_start;
        let mut prev_layer = 0u32;
        for (i, d) in descriptors.iter().enumerate() {
            if i > 0 && d.layer < prev_layer {
                return Err(EfpkError::OutOfOrderDescriptor {
                    index: i,
                    name: d.name.clone(),
                    layer: d.layer,
                    previous: prev_layer,
                });
            }
            prev_layer = d.layer;

            if d.rows == 0 || d.cols == 0 {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: empty shape",
                    d.name
                )));
            }
            let expect_padded = d.rows.div_ceil(register_width) * register_width;
            if d.padded_rows != expect_padded {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: padded rows {} (expected {expect_padded})",
                    d.name, d.padded_rows
                )));
            }
            if d.metadata_len as usize != metadata_len(d.cols as usize)
                || d.scales_len != 4 * d.cols
            {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: metadata/scales section sizes do not match {} channels",
                    d.name, d.cols
                )));
            }
            let has_smoothing = d.smoothing_alpha_beta.is_some();
            if has_smoothing && d.smoothing_len != 4 * (d.rows + d.cols)
                || !has_smoothing && (d.smoothing_len != 0 || d.smoothing_off != 0)
            {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: smoothing section size {}",
                    d.name, d.smoothing_len
                )));
            }

            // sections must be contiguous in order: metadata, scales,
            // smoothing (optional), blocks
            if d.metadata_off as u64 != cursor {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: metadata at {} (expected {cursor}); sections overlap or leave gaps",
                    d.name, d.metadata_off
                )));
            }
            if d.scales_off != d.metadata_off + d.metadata_len {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: scales offset {}",
                    d.name, d.scales_off
                )));
            }
            let after_scales = d.scales_off + d.scales_len;
            let blocks_expect = if has_smoothing {
                if d.smoothing_off != after_scales {
                    return Err(EfpkError::CorruptLayout(format!(
                        "tensor {}: smoothing offset {}",
                        d.name, d.smoothing_off
                    )));
                }
                d.smoothing_off + d.smoothing_len
            } else {
                after_scales
            };
            if d.blocks_off != blocks_expect {
                return Err(EfpkError::CorruptLayout(format!(
                    "tensor {}: blocks offset {} (expected {blocks_expect})",
                    d.name, d.blocks_off
                )));
            }
            cursor = d.blocks_off as u64 + d.blocks_len as u64;
        }
        if cursor != file_len {
            return Err(EfpkError::CorruptLayout(format!(
                "sections end at {cursor}, file is {file_len} bytes"
            )));
        }

        Ok(Self {
            path: path.to_path_buf(),
            register_width,
            descriptors,
            file_len,
            data_start,
        })
    }

    /// Distinct layer ids in file order.
    pub fn layer_ids(&self) -> Vec<u32> {
        let mut ids = Vec::new();
        for d in &self.descriptors {
            if ids.last() != Some(&d.layer) {
                ids.push(d.layer);
            }
        }
        ids
    }

    /// Streaming per-layer iterator over the file.
    pub fn stream(&self) -> Result<LayerStream, EfpkError> {
        let mut reader = BufReader::new(File::open(&self.path)?);
        // skip header and descriptor table; count it as read
        std::io::copy(
            &mut (&mut reader).take(self.data_start),
            &mut std::io::sink(),
        )?;
        Ok(LayerStream {
            register_width: self.register_width,
            descriptors: self.descriptors.clone(),
            file_len: self.file_len,
            next: 0,
            bytes_read: self.data_start,
            reader,
        })
    }

    /// Reads all tensors of one layer via its own file handle; safe to
    /// call from multiple threads for different layers.
    pub fn read_layer(&self, layer: u32) -> Result<LayerTensors, EfpkError> {
        let descs: Vec<&EfpkTensorDesc> = self
            .descriptors
            .iter()
            .filter(|d| d.layer == layer)
            .collect();
        if descs.is_empty() {
            return Err(EfpkError::CorruptLayout(format!(
                "no tensors for layer {layer}"
            )));
        }
        let mut file = File::open(&self.path)?;
        use std::io::Seek;
        file.seek(std::io::SeekFrom::Start(descs[0].metadata_off as u64))?;
        let mut reader = BufReader::new(file);
        let mut tensors = Vec::with_capacity(descs.len());
        for d in descs {
            // layer tensors are adjacent, so sequential reads line up
            tensors.push(parse_tensor_sections(d, self.register_width, &mut reader)?);
        }
        Ok(LayerTensors { layer, tensors })
    }

    /// Reads the whole model at once.
    pub fn read_all(&self) -> Result<QuantizedPackedModel, EfpkError> {
        let mut tensors = Vec::with_capacity(self.descriptors.len());
        for layer in self.stream()? {
            tensors.extend(layer?.tensors);
        }
        Ok(QuantizedPackedModel {
            register_width: self.register_width,
            tensors,
        })
    }
}

/// All packed tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub layer: u32,
    pub tensors: Vec<PackedTensor>,
}

/// Single-consumer streaming reader; yields layers in ascending id order
/// and verifies that the bytes consumed add up to the whole file.
pub struct LayerStream {
    register_width: u32,
    descriptors: Vec<EfpkTensorDesc>,
    file_len: u64,
    next: usize,
    bytes_read: u64,
    reader: BufReader<File>,
}

/// Reads one tensor's sections from a reader positioned at its metadata
/// offset; sections of one tensor are contiguous by construction.
fn parse_tensor_sections(
    d: &EfpkTensorDesc,
    register_width: u32,
    reader: &mut impl Read,
) -> Result<PackedTensor, EfpkError> {
    let metadata = read_vec(reader, d.metadata_len as usize, &d.name)?;
    let channel_bits = decode_bitwidth_metadata(&metadata, d.cols as usize)?;

    let scale_bytes = read_vec(reader, d.scales_len as usize, &d.name)?;
    let scales: Vec<f32> = scale_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let smoothing = if let Some((alpha, beta)) = d.smoothing_alpha_beta {
        let raw = read_vec(reader, d.smoothing_len as usize, &d.name)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (input, output) = vals.split_at(d.rows as usize);
        Some(TensorSmoothing {
            input: input.to_vec(),
            output: output.to_vec(),
            alpha,
            beta,
        })
    } else {
        None
    };

    let expected_blocks: u64 = channel_bits
        .iter()
        .map(|&b| d.padded_rows as u64 * b as u64 / 8)
        .sum();
    if expected_blocks != d.blocks_len as u64 {
        return Err(EfpkError::CorruptLayout(format!(
            "tensor {}: block section is {} bytes, size formula gives {expected_blocks}",
            d.name, d.blocks_len
        )));
    }
    let blocks = read_vec(reader, d.blocks_len as usize, &d.name)?;
    let got = crc32fast::hash(&blocks);
    if got != d.blocks_crc32 {
        return Err(EfpkError::ChecksumMismatch {
            name: d.name.clone(),
            expected: d.blocks_crc32,
            got,
        });
    }

    let tensor = PackedTensor {
        name: d.name.clone(),
        layer: d.layer,
        rows: d.rows,
        cols: d.cols,
        padded_rows: d.padded_rows,
        channel_bits,
        metadata,
        scales,
        blocks,
        smoothing,
        activation_scale: d.activation_scale,
    };
    tensor.validate(register_width)?;
    Ok(tensor)
}

impl LayerStream {
    fn read_tensor(&mut self, idx: usize) -> Result<PackedTensor, EfpkError> {
        let d = self.descriptors[idx].clone();
        let tensor = parse_tensor_sections(&d, self.register_width, &mut self.reader)?;
        self.bytes_read += d.section_len();
        Ok(tensor)
    }

    /// Total bytes consumed so far, including header and descriptors.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }
}

impl Iterator for LayerStream {
    type Item = Result<LayerTensors, EfpkError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.descriptors.len() {
            return None;
        }
        let layer = self.descriptors[self.next].layer;
        let mut tensors = Vec::new();
        while self.next < self.descriptors.len() && self.descriptors[self.next].layer == layer {
            match self.read_tensor(self.next) {
                Ok(t) => tensors.push(t),
                Err(e) => return Some(Err(e)),
            }
            self.next += 1;
        }
        if self.next == self.descriptors.len() && self.bytes_read != self.file_len {
            return Some(Err(EfpkError::CorruptLayout(format!(
                "consumed {} bytes of a {}-byte file",
                self.bytes_read, self.file_len
            ))));
        }
        Some(Ok(LayerTensors { layer, tensors }))
    }
}

/// Opens and fully reads an EFPK file.
pub fn read_efpk(path: &Path) -> Result<QuantizedPackedModel, EfpkError> {
    EfpkReader::open(path)?.read_all()
}

/// Opens an EFPK file for streaming layer-by-layer reads.
pub fn read_efpk_streaming(path: &Path) -> Result<LayerStream, EfpkError> {
    EfpkReader::open(path)?.stream()
}
