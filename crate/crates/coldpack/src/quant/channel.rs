//! Symmetric per-channel quantization and dequantization.

use serde::{Deserialize, Serialize};

use super::{channel_stats, QuantError};

/// One quantized channel: signed codes, scale and bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedChannel {
    pub codes: Vec<i8>,
    pub scale: f64,
    pub bits: u8,
}

/// Quantizes a channel symmetrically to `bits` bits.
///
/// For `bits >= 2` the scale is `max|w| / (2^(bits-1) - 1)` and codes are
/// round-half-even, clamped to the symmetric range. `bits = 1` degenerates
/// to sign quantization with the mean absolute value as scale. Zero
/// channels get scale 1 so dequantization stays exact.
pub fn quantize_channel(channel: &[f64], bits: u8) -> Result<QuantizedChannel, QuantError> {
    if !(1..=8).contains(&bits) {
        return Err(QuantError::BitsOutOfRange(bits));
    }
    if channel.is_empty() {
        return Err(QuantError::EmptyChannel);
    }
    if channel.iter().any(|w| !w.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    let stats = channel_stats(channel)?;

    if bits == 1 {
        let scale = if stats.mean_abs == 0.0 { 1.0 } else { stats.mean_abs };
        let codes = channel
            .iter()
            .map(|&w| if w < 0.0 { -1i8 } else { 1 })
            .collect();
        return Ok(QuantizedChannel { codes, scale, bits });
    }

    let qmax = (1i32 << (bits - 1)) - 1;
    let scale = if stats.max_abs == 0.0 {
        1.0
    } else {
        stats.max_abs / qmax as f64
    };
    let codes = channel
        .iter()
        .map(|&w| {
            let q = (w / scale).round_ties_even() as i32;
            q.clamp(-qmax, qmax) as i8
        })
        .collect();
    Ok(QuantizedChannel { codes, scale, bits })
}

/// Maps codes back to real values (`q * S`), validating the code range.
pub fn dequantize_channel(qc: &QuantizedChannel) -> Result<Vec<f64>, QuantError> {
    if !(1..=8).contains(&qc.bits) {
        return Err(QuantError::BitsOutOfRange(qc.bits));
    }
    for &q in &qc.codes {
        let ok = if qc.bits == 1 {
            q == -1 || q == 1
        } else {
            let qmax = ((1i32 << (qc.bits - 1)) - 1) as i8;
            (-qmax..=qmax).contains(&q)
        };
        if !ok {
            return Err(QuantError::CodeOutOfRange {
                code: q,
                bits: qc.bits,
            });
        }
    }
    Ok(qc.codes.iter().map(|&q| q as f64 * qc.scale).collect())
}
