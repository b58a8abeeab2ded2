//! NPU-aware adaptive quantization: channel statistics, the relative-error
//! metric, greedy bit-width allocation, symmetric quantize/dequantize and
//! activation-to-weight smoothing.
//!
//! Weights are quantized statically, uniformly and symmetrically at
//! per-output-channel granularity; activations at per-tensor granularity.
//! Channel `i` of a `D x C` tensor is column `i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pack::PackError;

mod allocate;
mod channel;
mod matrix;
mod model;
mod smoothing;

pub use allocate::{allocate_bits, allocate_bits_exhaustive, total_relative_error, BitAllocation};
pub use channel::{dequantize_channel, quantize_channel, QuantizedChannel};
pub use matrix::Matrix;
pub use model::{quantize_model, synthesize_calibration, CalibrationSet};
pub use smoothing::{
    calibrate_alpha, profile_activation_stats, smooth_tensor, smoothing_grid_error,
    SmoothingVectors,
};

/// Lower clamp for profiled activation statistics.
pub const ACTIVATION_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("empty channel")]
    EmptyChannel,
    #[error("non-finite value in channel")]
    NonFinite,
    #[error("bit-width {0} outside [1, 8]")]
    BitsOutOfRange(u8),
    #[error("budget {budget} infeasible for {channels} channels (need at least 1 bit each)")]
    InfeasibleBudget { budget: usize, channels: usize },
    #[error("instance with {channels} channels too large for the exhaustive oracle (limit {limit})")]
    InstanceTooLarge { channels: usize, limit: usize },
    #[error("code {code} out of range for {bits}-bit channel")]
    CodeOutOfRange { code: i8, bits: u8 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("smoothing vectors must be strictly positive")]
    NonPositiveSmoothing,
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("no calibration inputs for tensor {0} (smoothing enabled)")]
    MissingCalibration(String),
    #[error("alpha grid step {0} does not divide [0, 1]")]
    BadGridStep(f64),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Pack(#[from] PackError),
}

/// Per-channel statistics feeding the relative-error metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub max_abs: f64,
    pub mean_sq: f64,
    pub mean_abs: f64,
    pub dim: usize,
}

/// Exact max-abs, mean-square and mean-abs of a channel.
pub fn channel_stats(channel: &[f64]) -> Result<ChannelStats, QuantError> {
    if channel.is_empty() {
        return Err(QuantError::EmptyChannel);
    }
    let mut max_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut sum_abs = 0.0f64;
    for &w in channel {
        let a = w.abs();
        max_abs = max_abs.max(a);
        sum_sq += w * w;
        sum_abs += a;
    }
    let n = channel.len() as f64;
    Ok(ChannelStats {
        max_abs,
        mean_sq: sum_sq / n,
        mean_abs: sum_abs / n,
        dim: channel.len(),
    })
}

/// Closed-form relative error of quantizing a channel to `bits` bits:
/// `(max|W|)^2 / (E[W^2] * 4^bits)`. Zero-energy channels have no error.
pub fn relative_error(stats: &ChannelStats, bits: u8) -> f64 {
    assert!((1..=8).contains(&bits), "bit-width {bits} outside [1, 8]");
    if stats.mean_sq == 0.0 {
        return 0.0;
    }
    let ratio = stats.max_abs * stats.max_abs / stats.mean_sq;
    ratio / (1u64 << (2 * bits)) as f64
}

/// Brute-force relative error: one minus the cosine similarity between a
/// channel and its quantize/dequantize image. Oracle for [`relative_error`].
pub fn exact_relative_error(channel: &[f64], bits: u8) -> Result<f64, QuantError> {
    let qc = quantize_channel(channel, bits)?;
    let deq = dequantize_channel(&qc)?;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in channel.iter().zip(&deq) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0); // zero channel by convention
    }
    Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
}

/// Global quantization configuration, accepted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    /// Average bit-width budget per tensor (`B_e`).
    pub avg_bits: f64,
    /// Smoothing exponent used when `alpha_grid_step` is zero.
    pub alpha: f64,
    pub beta: f64,
    /// Grid step for alpha calibration; 0 disables the grid search.
    pub alpha_grid_step: f64,
    pub register_width: u32,
    pub smoothing: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            avg_bits: 5.0,
            alpha: 0.5,
            beta: 1.0,
            alpha_grid_step: 0.05,
            register_width: crate::pack::DEFAULT_REGISTER_WIDTH,
            smoothing: false,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        if !(1.0..=8.0).contains(&self.avg_bits) {
            return Err(QuantError::BadConfig(format!(
                "avg_bits {} outside [1, 8]",
                self.avg_bits
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(QuantError::BadConfig(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !self.beta.is_finite() {
            return Err(QuantError::BadConfig("beta must be finite".into()));
        }
        crate::pack::validate_register_width(self.register_width)?;
        Ok(())
    }

    /// Bit budget for one tensor with `cols` output channels.
    pub fn tensor_budget(&self, cols: usize) -> usize {
        (cols as f64 * self.avg_bits).floor() as usize
    }
}
