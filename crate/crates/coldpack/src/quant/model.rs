//! Whole-model quantization: smoothing, allocation, per-channel
//! quantization and packing, tensor by tensor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::pack::{
    encode_bitwidth_metadata, encode_offset, pack_channel, padding_code, PackedTensor,
    QuantizedPackedModel, TensorSmoothing,
};
use crate::tensorstore::TensorArchive;

use super::smoothing::alpha_grid;
use super::{
    allocate_bits, calibrate_alpha, channel_stats, profile_activation_stats, quantize_channel,
    smooth_tensor, Matrix, QuantConfig, QuantError, SmoothingVectors, ACTIVATION_EPSILON,
};

/// Calibration inputs per tensor name; each sample is one input row.
#[derive(Debug, Clone, Default)]
pub struct CalibrationSet {
    samples: BTreeMap<String, Vec<Vec<f64>>>,
}

impl CalibrationSet {
    pub fn insert(&mut self, name: &str, samples: Vec<Vec<f64>>) {
        self.samples.insert(name.to_string(), samples);
    }

    pub fn get(&self, name: &str) -> Option<&Vec<Vec<f64>>> {
        self.samples.get(name)
    }
}

/// Deterministic Gaussian calibration inputs for every archive tensor.
pub fn synthesize_calibration(
    archive: &TensorArchive,
    samples_per_tensor: usize,
    seed: u64,
) -> CalibrationSet {
    let mut set = CalibrationSet::default();
    for (idx, t) in archive.tensors.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9));
        let rows: Vec<Vec<f64>> = (0..samples_per_tensor.max(1))
            .map(|_| {
                (0..t.rows as usize)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        set.insert(&t.name, rows);
    }
    set
}

fn smoothing_for_tensor(
    w: &Matrix,
    samples: &[Vec<f64>],
    config: &QuantConfig,
) -> Result<(SmoothingVectors, f64), QuantError> {
    let alpha = if config.alpha_grid_step > 0.0 {
        alpha_grid(config.alpha_grid_step)?; // validate before the search
        calibrate_alpha(w, samples, config)?
    } else {
        config.alpha
    };
    let (s_in, _) = profile_activation_stats(samples)?;
    if s_in.len() != w.rows() {
        return Err(QuantError::DimensionMismatch(format!(
            "calibration dim {} vs tensor rows {}",
            s_in.len(),
            w.rows()
        )));
    }
    let inputs = Matrix::from_rows(samples)?;
    let outputs = inputs.matmul(w)?;
    let s_out: Vec<f64> = (0..outputs.cols())
        .map(|i| {
            outputs
                .column(i)
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.abs()))
                .max(ACTIVATION_EPSILON)
        })
        .collect();
    let sv = SmoothingVectors {
        s_in,
        s_out,
        alpha,
        beta: config.beta,
    };
    // static INT8 scale of the smoothed inputs the runtime will see
    let inv_in: Vec<f64> = sv.s_in.iter().map(|s| s.powf(-alpha)).collect();
    let act_scale = inputs
        .scaled_cols(&inv_in)?
        .max_abs()
        .max(ACTIVATION_EPSILON)
        / 127.0;
    Ok((sv, act_scale))
}

/// Packs one quantized channel, padding to the register width first.
fn pack_quantized_channel(
    codes: &[i8],
    bits: u8,
    padded_rows: usize,
    register_width: u32,
) -> Result<Vec<u8>, QuantError> {
    let mut u: Vec<u8> = Vec::with_capacity(padded_rows);
    for &q in codes {
        u.push(encode_offset(q as i16, bits)?);
    }
    u.resize(padded_rows, padding_code(bits));
    Ok(pack_channel(&u, bits, register_width)?)
}

/// Quantizes and packs every tensor of an archive.
///
/// Per tensor: optional smoothing with a calibrated exponent, greedy bit
/// allocation at the `floor(C * avg_bits)` budget, symmetric per-channel
/// quantization, then packing into weightlet blocks.
pub fn quantize_model(
    archive: &TensorArchive,
    config: &QuantConfig,
    calib: Option<&CalibrationSet>,
) -> Result<QuantizedPackedModel, QuantError> {
    config.validate()?;
    let r = config.register_width;

    let mut tensors = Vec::with_capacity(archive.tensors.len());
    for t in &archive.tensors {
        let rows = t.rows as usize;
        let cols = t.cols as usize;
        let w = Matrix::new(rows, cols, t.data.iter().map(|&v| v as f64).collect())?;

        let samples = calib.and_then(|c| c.get(&t.name));
        let (work, smoothing, activation_scale) = if config.smoothing {
            let samples =
                samples.ok_or_else(|| QuantError::MissingCalibration(t.name.clone()))?;
            let (sv, act_scale) = smoothing_for_tensor(&w, samples, config)?;
            let smoothed = smooth_tensor(&w, &sv)?;
            let stored = TensorSmoothing {
                input: sv.s_in.iter().map(|&v| v as f32).collect(),
                output: sv.s_out.iter().map(|&v| v as f32).collect(),
                alpha: sv.alpha as f32,
                beta: sv.beta as f32,
            };
            (smoothed, Some(stored), Some(act_scale as f32))
        } else {
            let act_scale = match samples {
                Some(s) => Some(profile_activation_stats(s)?.1 as f32),
                None => None,
            };
            (w, None, act_scale)
        };

        let stats: Vec<_> = (0..cols)
            .map(|i| channel_stats(&work.column(i)))
            .collect::<Result<_, _>>()?;
        let alloc = allocate_bits(&stats, config.tensor_budget(cols))?;

        let padded_rows = (t.rows.div_ceil(r) * r) as usize;
        let mut scales = Vec::with_capacity(cols);
        let mut blocks = Vec::new();
        for i in 0..cols {
            let qc = quantize_channel(&work.column(i), alloc.bits[i])?;
            scales.push(qc.scale as f32);
            blocks.extend(pack_quantized_channel(
                &qc.codes,
                alloc.bits[i],
                padded_rows,
                r,
            )?);
        }

        tensors.push(PackedTensor {
            name: t.name.clone(),
            layer: t.layer,
            rows: t.rows,
            cols: t.cols,
            padded_rows: padded_rows as u32,
            metadata: encode_bitwidth_metadata(&alloc.bits)?,
            channel_bits: alloc.bits,
            scales,
            blocks,
            smoothing,
            activation_scale,
        });
    }

    let model = QuantizedPackedModel {
        register_width: r,
        tensors,
    };
    model.validate()?;
    Ok(model)
}
