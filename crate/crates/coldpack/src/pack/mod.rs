//! Sub-byte weight packing: weightlet decomposition, interleaved block
//! layout, bit-width metadata, and the packed-tensor container.
//!
//! A quantized channel is stored as *groups* of `R` consecutive weights,
//! where `R` is the register width in bits. Each weight of width `W` is
//! decomposed into weightlets of 4, 2, or 1 bits. Weightlets of the same
//! width within a group are packed into `R`-bit blocks, interleaved so
//! that one block byte always carries weightlets of `R/8` consecutive
//! weights (a *stripe*). Unpacking a stripe then needs only mask, shift
//! and or operations over whole registers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod kernels;
pub mod conformance;

pub use kernels::{
    pack_channel, stripe_field_ops, unpack_channel_reference, unpack_channel_simd, StripeFieldOp,
};

/// Register widths the wide-lane unpacker supports, in bits.
pub const SUPPORTED_REGISTER_WIDTHS: [u32; 5] = [8, 16, 32, 64, 128];

/// Default register width: 128-bit wide registers.
pub const DEFAULT_REGISTER_WIDTH: u32 = 128;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("bit-width {0} outside [1, 8]")]
    BitsOutOfRange(u8),
    #[error("register width {0} unsupported (must be one of 8/16/32/64/128)")]
    BadRegisterWidth(u32),
    #[error("code {code} out of range for {bits}-bit quantization")]
    CodeOutOfRange { code: i16, bits: u8 },
    #[error("channel length {len} is not a multiple of the group size {group}")]
    LengthNotGroupMultiple { len: usize, group: usize },
    #[error("block byte length {len} inconsistent with {bits}-bit groups of {group} weights")]
    BlockLengthMismatch { len: usize, bits: u8, group: usize },
    #[error("metadata length {len} does not match {channels} channels")]
    MetadataLengthMismatch { len: usize, channels: usize },
    #[error("packed tensor invalid: {0}")]
    InvalidTensor(String),
}

/// One weightlet field of a decomposed weight: `width` bits of the
/// original value starting at `lsb_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightletField {
    pub width: u8,
    pub lsb_offset: u8,
}

/// Decomposition of a `bits`-wide weight into 4/2/1-bit weightlets.
///
/// Fields are ordered by descending width; 4-bit fields occupy the lowest
/// bits of the value, then 2-bit, with a 1-bit field (if any) at the top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightletPlan {
    pub bits: u8,
    pub fields: Vec<WeightletField>,
}

impl WeightletPlan {
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }
}

/// Greedy 4-then-2-then-1 decomposition of a bit-width into weightlets.
pub fn decompose(bits: u8) -> Result<WeightletPlan, PackError> {
    if !(1..=8).contains(&bits) {
        return Err(PackError::BitsOutOfRange(bits));
    }
    let mut fields = Vec::new();
    let mut offset = 0u8;
    let mut remaining = bits;
    for width in [4u8, 2, 1] {
        while remaining >= width {
            fields.push(WeightletField {
                width,
                lsb_offset: offset,
            });
            offset += width;
            remaining -= width;
        }
    }
    debug_assert_eq!(offset, bits);
    Ok(WeightletPlan { bits, fields })
}

pub(crate) fn validate_register_width(r: u32) -> Result<(), PackError> {
    if SUPPORTED_REGISTER_WIDTHS.contains(&r) {
        Ok(())
    } else {
        Err(PackError::BadRegisterWidth(r))
    }
}

/// Maps a signed code to its offset-binary storage form.
///
/// For `bits >= 2` the mapping is `u = q + 2^(bits-1)`, which leaves
/// `u = 0` unused; zero-padded rows therefore store `u = 2^(bits-1)` and
/// decode back to 0. For `bits = 1` the codes are `{-1, +1}` stored as
/// `{0, 1}`.
pub fn encode_offset(q: i16, bits: u8) -> Result<u8, PackError> {
    if !(1..=8).contains(&bits) {
        return Err(PackError::BitsOutOfRange(bits));
    }
    if bits == 1 {
        return match q {
            -1 => Ok(0),
            1 => Ok(1),
            _ => Err(PackError::CodeOutOfRange { code: q, bits }),
        };
    }
    let half = 1i16 << (bits - 1);
    if q <= -half || q >= half {
        return Err(PackError::CodeOutOfRange { code: q, bits });
    }
    Ok((q + half) as u8)
}

/// Inverse of [`encode_offset`]; rejects the reserved `u = 0` for widths >= 2.
pub fn decode_offset(u: u8, bits: u8) -> Result<i8, PackError> {
    if !(1..=8).contains(&bits) {
        return Err(PackError::BitsOutOfRange(bits));
    }
    if bits == 1 {
        return match u {
            0 => Ok(-1),
            1 => Ok(1),
            _ => Err(PackError::CodeOutOfRange {
                code: u as i16,
                bits,
            }),
        };
    }
    let max = if bits == 8 { u8::MAX } else { (1u8 << bits) - 1 };
    if u == 0 || u > max {
        return Err(PackError::CodeOutOfRange {
            code: u as i16,
            bits,
        });
    }
    Ok((u as i16 - (1i16 << (bits - 1))) as i8)
}

/// Offset-binary storage code for a zero weight (row padding).
pub fn padding_code(bits: u8) -> u8 {
    if bits == 1 {
        1 // sign(0) = +1
    } else {
        1 << (bits - 1)
    }
}

/// Packs per-channel bit-widths as a 3-bit code array, LSB-first.
///
/// Code `bits - 1` is stored at bit offset `3 * i` of the byte stream.
pub fn encode_bitwidth_metadata(bits_list: &[u8]) -> Result<Vec<u8>, PackError> {
    let mut out = vec![0u8; metadata_len(bits_list.len())];
    for (i, &b) in bits_list.iter().enumerate() {
        if !(1..=8).contains(&b) {
            return Err(PackError::BitsOutOfRange(b));
        }
        let code = b - 1;
        for j in 0..3 {
            if (code >> j) & 1 == 1 {
                let p = 3 * i + j;
                out[p / 8] |= 1 << (p % 8);
            }
        }
    }
    Ok(out)
}

/// Decodes `channels` bit-widths from an INT3 metadata array.
pub fn decode_bitwidth_metadata(bytes: &[u8], channels: usize) -> Result<Vec<u8>, PackError> {
    if bytes.len() != metadata_len(channels) {
        return Err(PackError::MetadataLengthMismatch {
            len: bytes.len(),
            channels,
        });
    }
    let mut out = Vec::with_capacity(channels);
    for i in 0..channels {
        let mut code = 0u8;
        for j in 0..3 {
            let p = 3 * i + j;
            if (bytes[p / 8] >> (p % 8)) & 1 == 1 {
                code |= 1 << j;
            }
        }
        out.push(code + 1); // all 8 codes map to valid widths
    }
    Ok(out)
}

/// Byte length of the INT3 metadata section for `channels` channels.
pub fn metadata_len(channels: usize) -> usize {
    (3 * channels).div_ceil(8)
}

/// Estimated wide ops per weight for unpacking a `bits`-wide channel,
/// assuming 128-bit registers.
///
/// Per stripe each field costs one mask and one shift, merging costs
/// `F - 1` ors, and sign restoration one subtract (or the 1-bit fix-up),
/// so a stripe of `R/8 = 16` weights costs `3F` wide ops in total.
pub fn unpack_instruction_estimate(bits: u8) -> Result<f64, PackError> {
    let plan = decompose(bits)?;
    let f = plan.field_count() as f64;
    let ops_per_stripe = 2.0 * f + (f - 1.0) + 1.0;
    Ok(ops_per_stripe / (DEFAULT_REGISTER_WIDTH as f64 / 8.0))
}

/// Weighted-average instruction estimate over a bit-width histogram.
pub fn unpack_instruction_estimate_for_mix(histogram: &[(u8, u64)]) -> Result<f64, PackError> {
    let total: u64 = histogram.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for &(bits, n) in histogram {
        acc += unpack_instruction_estimate(bits)? * n as f64;
    }
    Ok(acc / total as f64)
}

/// Per-tensor smoothing vectors as stored alongside the packed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSmoothing {
    /// Per-input-channel factors (length `rows`).
    pub input: Vec<f32>,
    /// Per-output-channel factors (length `cols`).
    pub output: Vec<f32>,
    pub alpha: f32,
    pub beta: f32,
}

/// One packed weight tensor: weightlet blocks plus metadata, scales and
/// optional smoothing vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedTensor {
    pub name: String,
    pub layer: u32,
    /// Weights per channel before padding (`D`).
    pub rows: u32,
    /// Output channels (`C`).
    pub cols: u32,
    /// `rows` rounded up to a multiple of the register width (`D'`).
    pub padded_rows: u32,
    /// Per-channel bit-widths.
    pub channel_bits: Vec<u8>,
    /// INT3-packed copy of `channel_bits`.
    pub metadata: Vec<u8>,
    /// Per-channel dequantization scales.
    pub scales: Vec<f32>,
    /// Concatenated per-channel weightlet block bytes.
    pub blocks: Vec<u8>,
    pub smoothing: Option<TensorSmoothing>,
    /// Static per-tensor INT8 activation scale, when calibrated.
    pub activation_scale: Option<f32>,
}

impl PackedTensor {
    /// Block bytes of channel `i`: exactly `D' * W_i / 8`.
    pub fn channel_block_len(&self, i: usize) -> usize {
        self.padded_rows as usize * self.channel_bits[i] as usize / 8
    }

    /// Byte range of channel `i` within `blocks`.
    pub fn channel_block_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = (0..i).map(|j| self.channel_block_len(j)).sum();
        start..start + self.channel_block_len(i)
    }

    pub fn channel_blocks(&self, i: usize) -> &[u8] {
        &self.blocks[self.channel_block_range(i)]
    }

    /// Total block bytes implied by the size formula `sum(D' * W_i / 8)`.
    pub fn expected_blocks_len(&self) -> usize {
        (0..self.channel_bits.len())
            .map(|i| self.channel_block_len(i))
            .sum()
    }

    /// Histogram of channel bit-widths, indexed 1..=8.
    pub fn bit_histogram(&self) -> [u64; 9] {
        let mut h = [0u64; 9];
        for &b in &self.channel_bits {
            h[b as usize] += 1;
        }
        h
    }

    pub fn bits_used(&self) -> u64 {
        self.channel_bits.iter().map(|&b| b as u64).sum()
    }

    pub fn mean_bits(&self) -> f64 {
        if self.channel_bits.is_empty() {
            return 0.0;
        }
        self.bits_used() as f64 / self.channel_bits.len() as f64
    }

    pub fn validate(&self, register_width: u32) -> Result<(), PackError> {
        validate_register_width(register_width)?;
        let c = self.cols as usize;
        if self.channel_bits.len() != c || self.scales.len() != c {
            return Err(PackError::InvalidTensor(format!(
                "tensor {}: {} bit-widths / {} scales for {} channels",
                self.name,
                self.channel_bits.len(),
                self.scales.len(),
                c
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(PackError::InvalidTensor(format!(
                "tensor {}: empty shape {}x{}",
                self.name, self.rows, self.cols
            )));
        }
        let expect_padded = self.rows.div_ceil(register_width) * register_width;
        if self.padded_rows != expect_padded {
            return Err(PackError::InvalidTensor(format!(
                "tensor {}: padded rows {} != {}",
                self.name, self.padded_rows, expect_padded
            )));
        }
        for &b in &self.channel_bits {
            if !(1..=8).contains(&b) {
                return Err(PackError::BitsOutOfRange(b));
            }
        }
        let decoded = decode_bitwidth_metadata(&self.metadata, c)?;
        if decoded != self.channel_bits {
            return Err(PackError::InvalidTensor(format!(
                "tensor {}: metadata does not decode to channel bit-widths",
                self.name
            )));
        }
        if self.blocks.len() != self.expected_blocks_len() {
            return Err(PackError::InvalidTensor(format!(
                "tensor {}: {} block bytes, size formula gives {}",
                self.name,
                self.blocks.len(),
                self.expected_blocks_len()
            )));
        }
        if let Some(s) = &self.smoothing {
            if s.input.len() != self.rows as usize || s.output.len() != self.cols as usize {
                return Err(PackError::InvalidTensor(format!(
                    "tensor {}: smoothing vector lengths {}/{} for shape {}x{}",
                    self.name,
                    s.input.len(),
                    s.output.len(),
                    self.rows,
                    self.cols
                )));
            }
        }
        Ok(())
    }
}

/// Unpacks and dequantizes every channel of a packed tensor, returning
/// per-channel f32 values truncated to the unpadded length.
pub fn dequantize_tensor(
    tensor: &PackedTensor,
    register_width: u32,
) -> Result<Vec<Vec<f32>>, PackError> {
    let mut out = Vec::with_capacity(tensor.cols as usize);
    for i in 0..tensor.cols as usize {
        let codes = kernels::unpack_channel_simd(
            tensor.channel_blocks(i),
            tensor.channel_bits[i],
            register_width,
        )?;
        let scale = tensor.scales[i];
        out.push(
            codes[..tensor.rows as usize]
                .iter()
                .map(|&q| q as f32 * scale)
                .collect(),
        );
    }
    Ok(out)
}

/// A fully quantized and packed model, ready for EFPK serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedPackedModel {
    pub register_width: u32,
    pub tensors: Vec<PackedTensor>,
}

impl QuantizedPackedModel {
    pub fn validate(&self) -> Result<(), PackError> {
        for t in &self.tensors {
            t.validate(self.register_width)?;
        }
        Ok(())
    }

    /// Model-wide bit-width histogram.
    pub fn bit_histogram(&self) -> [u64; 9] {
        let mut h = [0u64; 9];
        for t in &self.tensors {
            for (i, &n) in t.bit_histogram().iter().enumerate() {
                h[i] += n;
            }
        }
        h
    }

    /// Distinct layer ids in ascending order.
    pub fn layer_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tensors.iter().map(|t| t.layer).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_covers_all_widths() {
        let f = |b: u8| decompose(b).unwrap().fields;
        assert_eq!(f(1), vec![WeightletField { width: 1, lsb_offset: 0 }]);
        assert_eq!(f(2), vec![WeightletField { width: 2, lsb_offset: 0 }]);
        assert_eq!(
            f(3),
            vec![
                WeightletField { width: 2, lsb_offset: 0 },
                WeightletField { width: 1, lsb_offset: 2 },
            ]
        );
        assert_eq!(f(4), vec![WeightletField { width: 4, lsb_offset: 0 }]);
        assert_eq!(
            f(5),
            vec![
                WeightletField { width: 4, lsb_offset: 0 },
                WeightletField { width: 1, lsb_offset: 4 },
            ]
        );
        assert_eq!(
            f(6),
            vec![
                WeightletField { width: 4, lsb_offset: 0 },
                WeightletField { width: 2, lsb_offset: 4 },
            ]
        );
        // One field of each width, 4-bit lowest, 1-bit at the top.
        assert_eq!(
            f(7),
            vec![
                WeightletField { width: 4, lsb_offset: 0 },
                WeightletField { width: 2, lsb_offset: 4 },
                WeightletField { width: 1, lsb_offset: 6 },
            ]
        );
        assert_eq!(
            f(8),
            vec![
                WeightletField { width: 4, lsb_offset: 0 },
                WeightletField { width: 4, lsb_offset: 4 },
            ]
        );
        assert!(decompose(0).is_err());
        assert!(decompose(9).is_err());
    }

    #[test]
    fn offset_codes_roundtrip_exhaustively() {
        for bits in 1..=8u8 {
            let range: Vec<i16> = if bits == 1 {
                vec![-1, 1]
            } else {
                let half = 1i16 << (bits - 1);
                (-(half - 1)..=(half - 1)).collect()
            };
            for q in range {
                let u = encode_offset(q, bits).unwrap();
                assert!((u as u16) < (1 << bits));
                assert_eq!(decode_offset(u, bits).unwrap() as i16, q);
            }
        }
    }

    #[test]
    fn offset_code_fixtures() {
        assert_eq!(encode_offset(-3, 3).unwrap(), 1);
        assert_eq!(encode_offset(0, 8).unwrap(), 128);
        // u = 0 is reserved for widths >= 2.
        assert!(decode_offset(0, 3).is_err());
        assert!(encode_offset(-4, 3).is_err());
        assert!(encode_offset(2, 1).is_err());
    }

    #[test]
    fn padding_decodes_to_zero_or_positive_sign() {
        for bits in 2..=8u8 {
            assert_eq!(decode_offset(padding_code(bits), bits).unwrap(), 0);
        }
        assert_eq!(decode_offset(padding_code(1), 1).unwrap(), 1);
    }

    #[test]
    fn metadata_fixture() {
        // widths [5, 5, 8] -> codes [4, 4, 7] packed 3 bits apiece, LSB-first
        assert_eq!(encode_bitwidth_metadata(&[5, 5, 8]).unwrap(), vec![0xE4, 0x01]);
        assert_eq!(
            decode_bitwidth_metadata(&[0xE4, 0x01], 3).unwrap(),
            vec![5, 5, 8]
        );
        assert_eq!(encode_bitwidth_metadata(&[1; 8]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn metadata_roundtrip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..100);
            let widths: Vec<u8> = (0..n).map(|_| rng.gen_range(1..=8)).collect();
            let bytes = encode_bitwidth_metadata(&widths).unwrap();
            assert_eq!(bytes.len(), metadata_len(n));
            assert_eq!(decode_bitwidth_metadata(&bytes, n).unwrap(), widths);
        }
    }

    #[test]
    fn instruction_estimates() {
        assert_eq!(unpack_instruction_estimate(3).unwrap(), 0.375);
        assert_eq!(unpack_instruction_estimate(5).unwrap(), 0.375);
        assert_eq!(unpack_instruction_estimate(7).unwrap(), 0.5625);
        assert_eq!(unpack_instruction_estimate(4).unwrap(), 0.1875);
        assert_eq!(unpack_instruction_estimate(8).unwrap(), 0.375);
        // 50/50 mix of 3- and 7-bit channels
        let mix = unpack_instruction_estimate_for_mix(&[(3, 10), (7, 10)]).unwrap();
        assert!((mix - (0.375 + 0.5625) / 2.0).abs() < 1e-12);
    }
}
