//! Pack and unpack kernels for the interleaved weightlet layout.
//!
//! Layout recap for one group of `R` weights with bit-width `W` and plan
//! fields of width `B`:
//!   - each field stores `B` blocks of `R` bits (`R/8` bytes);
//!   - block `m` covers stripes `m*8/B .. (m+1)*8/B`, where a stripe is
//!     `R/8` consecutive weights;
//!   - byte `k` of a block belongs to weight offset `k` of every stripe
//!     the block covers, with stripe `t` (in-block index) occupying bit
//!     positions `[8-(t+1)*B, 7-t*B]` of the byte, MSB first.
//!
//! Blocks are emitted per group in plan order (descending field width),
//! blocks of one field in ascending stripe coverage.

use super::{decompose, validate_register_width, PackError};

/// Mask/shift pair a wide lane applies for one field of one stripe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripeFieldOp {
    pub width: u8,
    pub lsb_offset: u8,
    /// Block index within the field's block list.
    pub block_index: usize,
    /// Per-byte AND mask selecting this stripe's weightlet.
    pub mask_byte: u8,
    /// Right shift moving the weightlet to its target position;
    /// negative means left shift.
    pub shift: i8,
}

/// The mask/shift schedule for one stripe of a `bits`-wide group.
pub fn stripe_field_ops(bits: u8, stripe: usize) -> Result<Vec<StripeFieldOp>, PackError> {
    if stripe >= 8 {
        return Err(PackError::InvalidTensor(format!(
            "stripe index {stripe} out of range"
        )));
    }
    let plan = decompose(bits)?;
    Ok(plan
        .fields
        .iter()
        .map(|f| {
            let spb = (8 / f.width) as usize; // stripes per block
            let m = stripe / spb;
            let t = stripe % spb;
            let low_bit = 8 - (t as u8 + 1) * f.width;
            StripeFieldOp {
                width: f.width,
                lsb_offset: f.lsb_offset,
                block_index: m,
                mask_byte: (((1u16 << f.width) - 1) as u8) << low_bit,
                shift: low_bit as i8 - f.lsb_offset as i8,
            }
        })
        .collect())
}

/// Packs offset-binary codes of one channel into weightlet block bytes.
///
/// `u_codes.len()` must already be padded to a multiple of the group size
/// (`r` weights) and every code must fit in `bits`.
pub fn pack_channel(u_codes: &[u8], bits: u8, r: u32) -> Result<Vec<u8>, PackError> {
    let plan = decompose(bits)?;
    validate_register_width(r)?;
    let group = r as usize;
    if u_codes.is_empty() || !u_codes.len().is_multiple_of(group) {
        return Err(PackError::LengthNotGroupMultiple {
            len: u_codes.len(),
            group,
        });
    }
    let limit = if bits == 8 { u16::MAX } else { 1u16 << bits };
    if let Some(&bad) = u_codes.iter().find(|&&u| u as u16 >= limit) {
        return Err(PackError::CodeOutOfRange {
            code: bad as i16,
            bits,
        });
    }

    let lane = group / 8; // bytes per block, weights per stripe
    let mut out = Vec::with_capacity(u_codes.len() * bits as usize / 8);
    for g in 0..u_codes.len() / group {
        let base = g * group;
        for field in &plan.fields {
            let width = field.width as usize;
            let spb = 8 / width; // stripes per block
            for m in 0..width {
                for k in 0..lane {
                    let mut byte = 0u8;
                    for t in 0..spb {
                        let w = base + (m * spb + t) * lane + k;
                        let v = (u_codes[w] >> field.lsb_offset) & (((1u16 << width) - 1) as u8);
                        byte |= v << (8 - (t + 1) * width);
                    }
                    out.push(byte);
                }
            }
        }
    }
    Ok(out)
}

fn check_block_len(blocks: &[u8], bits: u8, r: u32) -> Result<usize, PackError> {
    let group_bytes = r as usize * bits as usize / 8;
    if blocks.is_empty() || !blocks.len().is_multiple_of(group_bytes) {
        return Err(PackError::BlockLengthMismatch {
            len: blocks.len(),
            bits,
            group: r as usize,
        });
    }
    Ok(blocks.len() / group_bytes)
}

/// Scalar bit-by-bit unpacker; the ground truth the wide-lane kernel is
/// checked against.
///
/// Returns raw signed values `u - 2^(bits-1)` (or `2u - 1` for 1-bit);
/// range validation against the symmetric code book is the caller's
/// concern, so zero block bytes surface as `-2^(bits-1)`.
pub fn unpack_channel_reference(blocks: &[u8], bits: u8, r: u32) -> Result<Vec<i8>, PackError> {
    let plan = decompose(bits)?;
    validate_register_width(r)?;
    let n_groups = check_block_len(blocks, bits, r)?;
    let group = r as usize;
    let lane = group / 8;

    let mut u = vec![0u8; n_groups * group];
    let group_bytes = group * bits as usize / 8;
    for g in 0..n_groups {
        let mut field_base = g * group_bytes;
        for field in &plan.fields {
            let width = field.width as usize;
            let spb = 8 / width;
            for m in 0..width {
                for k in 0..lane {
                    let byte = blocks[field_base + m * lane + k];
                    for t in 0..spb {
                        let v = (byte >> (8 - (t + 1) * width)) & (((1u16 << width) - 1) as u8);
                        let w = g * group + (m * spb + t) * lane + k;
                        u[w] |= v << field.lsb_offset;
                    }
                }
            }
            field_base += width * lane;
        }
    }
    Ok(u.into_iter().map(|v| raw_decode(v, bits)).collect())
}

#[inline]
fn raw_decode(u: u8, bits: u8) -> i8 {
    if bits == 1 {
        2 * u as i8 - 1
    } else {
        (u as i16 - (1i16 << (bits - 1))) as i8
    }
}

/// Wide-lane unpacker: per stripe, masks each covering block, aligns with
/// one shift per field, ors the fields together and restores signs with a
/// single per-byte subtract. Bit-exact with [`unpack_channel_reference`].
///
/// Lanes are simulated with `u128` SWAR arithmetic so every register
/// width up to 128 bits runs through the same code path.
pub fn unpack_channel_simd(blocks: &[u8], bits: u8, r: u32) -> Result<Vec<i8>, PackError> {
    let plan = decompose(bits)?;
    validate_register_width(r)?;
    let n_groups = check_block_len(blocks, bits, r)?;
    let group = r as usize;
    let lane = group / 8;
    let group_bytes = group * bits as usize / 8;

    // Byte offset of each field's block list within a group.
    let field_base: Vec<usize> = plan
        .fields
        .iter()
        .scan(0usize, |acc, f| {
            let cur = *acc;
            *acc += f.width as usize * lane;
            Some(cur)
        })
        .collect();

    let mut out = Vec::with_capacity(n_groups * group);
    let mut stripe_ops = Vec::with_capacity(8);
    for s in 0..8 {
        stripe_ops.push(stripe_field_ops(bits, s)?);
    }

    for g in 0..n_groups {
        let gbase = g * group_bytes;
        for ops in &stripe_ops {
            let mut acc = 0u128;
            for (op, base) in ops.iter().zip(&field_base) {
                let start = gbase + base + op.block_index * lane;
                let reg = load_lane(&blocks[start..start + lane]);
                let masked = reg & replicate(op.mask_byte, lane);
                acc |= if op.shift >= 0 {
                    masked >> op.shift as u32
                } else {
                    masked << (-op.shift) as u32
                };
            }
            let signed = if bits == 1 {
                swar_sub_bytes(acc << 1, 1, lane)
            } else {
                swar_sub_bytes(acc, 1 << (bits - 1), lane)
            };
            store_lane(signed, lane, &mut out);
        }
        debug_assert_eq!(out.len(), (g + 1) * group);
    }
    Ok(out)
}

#[inline]
fn load_lane(bytes: &[u8]) -> u128 {
    let mut buf = [0u8; 16];
    buf[..bytes.len()].copy_from_slice(bytes);
    u128::from_le_bytes(buf)
}

#[inline]
fn store_lane(v: u128, n_bytes: usize, out: &mut Vec<i8>) {
    let bytes = v.to_le_bytes();
    out.extend(bytes[..n_bytes].iter().map(|&b| b as i8));
}

#[inline]
fn replicate(byte: u8, n_bytes: usize) -> u128 {
    let mut v = 0u128;
    for i in 0..n_bytes {
        v |= (byte as u128) << (8 * i);
    }
    v
}

/// Per-byte wrapping subtraction of a constant without borrow
/// propagation across byte lanes (Hacker's Delight multibyte subtract).
#[inline]
fn swar_sub_bytes(x: u128, k: u8, n_bytes: usize) -> u128 {
    let h = replicate(0x80, n_bytes);
    let y = replicate(k, n_bytes);
    ((x | h) - (y & !h)) ^ ((x ^ !y) & h)
}

#[cfg(test)]
mod tests {
    use super::super::{encode_offset, padding_code};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn swar_sub_matches_per_byte_wrapping_sub() {
        // exhaustive over single-byte lanes
        for x in 0..=255u8 {
            for k in [1u8, 2, 4, 8, 16, 32, 64, 128] {
                let got = swar_sub_bytes(x as u128, k, 1) as u8;
                assert_eq!(got, x.wrapping_sub(k), "x={x} k={k}");
            }
        }
        // random 16-byte lanes
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let bytes: [u8; 16] = rng.gen();
            let k: u8 = 1 << rng.gen_range(0..8);
            let got = swar_sub_bytes(u128::from_le_bytes(bytes), k, 16).to_le_bytes();
            for i in 0..16 {
                assert_eq!(got[i], bytes[i].wrapping_sub(k));
            }
        }
    }

    #[test]
    fn three_bit_interleave_fixture() {
        // q = [1,-2,3,-3,0,2,-1,1] -> u = [5,2,7,1,4,6,3,5]; R = 8
        let q = [1i16, -2, 3, -3, 0, 2, -1, 1];
        let u: Vec<u8> = q.iter().map(|&q| encode_offset(q, 3).unwrap()).collect();
        assert_eq!(u, vec![5, 2, 7, 1, 4, 6, 3, 5]);
        let blocks = pack_channel(&u, 3, 8).unwrap();
        assert_eq!(blocks, vec![0x6D, 0x2D, 0xAD]);
        let back = unpack_channel_reference(&blocks, 3, 8).unwrap();
        assert_eq!(back, vec![1, -2, 3, -3, 0, 2, -1, 1]);
        let wide = unpack_channel_simd(&blocks, 3, 8).unwrap();
        assert_eq!(wide, back);
    }

    #[test]
    fn three_bit_stripe0_shift_constants() {
        let ops = stripe_field_ops(3, 0).unwrap();
        assert_eq!(ops.len(), 2);
        // first 2-bit block: leading two bits, right shift 6
        assert_eq!(ops[0].width, 2);
        assert_eq!(ops[0].mask_byte, 0b1100_0000);
        assert_eq!(ops[0].shift, 6);
        // 1-bit block: leading bit, right shift 5 to form the MSB
        assert_eq!(ops[1].width, 1);
        assert_eq!(ops[1].mask_byte, 0b1000_0000);
        assert_eq!(ops[1].shift, 5);
    }

    #[test]
    fn five_bit_plan_has_two_fields() {
        // fields 4+1: two masks, two shifts, one or, one subtract per stripe
        let ops = stripe_field_ops(5, 0).unwrap();
        assert_eq!(ops.len(), 2);
        assert_eq!(ops[0].width, 4);
        assert_eq!(ops[1].width, 1);
    }

    #[test]
    fn byte_aligned_eight_bit_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<u8> = (0..32).map(|_| rng.gen_range(1..=255)).collect();
        let blocks = pack_channel(&u, 8, 8).unwrap();
        assert_eq!(blocks.len(), u.len());
        let back = unpack_channel_reference(&blocks, 8, 8).unwrap();
        let expect: Vec<i8> = u.iter().map(|&v| (v as i16 - 128) as i8).collect();
        assert_eq!(back, expect);
        assert_eq!(unpack_channel_simd(&blocks, 8, 8).unwrap(), back);
    }

    #[test]
    fn all_zero_codes_pack_to_zero_bytes() {
        let u = vec![0u8; 16];
        for bits in 1..=8 {
            let blocks = pack_channel(&u, bits, 8).unwrap();
            assert!(blocks.iter().all(|&b| b == 0));
            // zero bytes decode to the raw lower bound before any guard
            let back = unpack_channel_reference(&blocks, bits, 8).unwrap();
            let raw = if bits == 1 { -1 } else { -(1i16 << (bits - 1)) as i8 };
            assert!(back.iter().all(|&v| v == raw));
        }
    }

    #[test]
    fn zero_padding_unpacks_to_zero() {
        for bits in 2..=8 {
            let u = vec![padding_code(bits); 8];
            let blocks = pack_channel(&u, bits, 8).unwrap();
            let back = unpack_channel_reference(&blocks, bits, 8).unwrap();
            assert!(back.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn roundtrip_random_all_widths_and_registers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..400 {
            let bits: u8 = rng.gen_range(1..=8);
            let r = [8u32, 16, 128][rng.gen_range(0..3)];
            let groups = rng.gen_range(1..5);
            let limit = if bits == 8 { 256u16 } else { 1 << bits };
            let u: Vec<u8> = (0..groups * r as usize)
                .map(|_| rng.gen_range(0..limit) as u8)
                .collect();
            let blocks = pack_channel(&u, bits, r).unwrap();
            assert_eq!(blocks.len(), u.len() * bits as usize / 8);
            let reference = unpack_channel_reference(&blocks, bits, r).unwrap();
            let expect: Vec<i8> = u.iter().map(|&v| raw_decode(v, bits)).collect();
            assert_eq!(reference, expect);
            assert_eq!(unpack_channel_simd(&blocks, bits, r).unwrap(), reference);
        }
    }

    #[test]
    fn stripe_ops_touch_only_covering_blocks() {
        // unpacking one stripe reads exactly one block per field, the
        // block that covers it
        for bits in 1..=8u8 {
            let field_count = super::super::decompose(bits).unwrap().fields.len();
            for stripe in 0..8usize {
                let ops = stripe_field_ops(bits, stripe).unwrap();
                assert_eq!(ops.len(), field_count);
                for op in &ops {
                    let spb = (8 / op.width) as usize;
                    assert_eq!(op.block_index, stripe / spb);
                    assert_eq!(op.mask_byte.count_ones(), op.width as u32);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_lengths_and_codes() {
        assert!(pack_channel(&[0u8; 7], 3, 8).is_err());
        assert!(pack_channel(&[8u8; 8], 3, 8).is_err()); // 8 >= 2^3
        assert!(pack_channel(&[0u8; 8], 3, 24).is_err());
        assert!(unpack_channel_reference(&[0u8; 5], 3, 8).is_err());
        assert!(unpack_channel_simd(&[0u8; 5], 3, 8).is_err());
    }
}
