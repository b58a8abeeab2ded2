//! Desk-scale synthetic model generation for end-to-end runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::pack::QuantizedPackedModel;
use crate::quant::{quantize_model, synthesize_calibration, QuantConfig};
use crate::tensorstore::{ArchiveTensor, DType, TensorArchive};

use super::ColdStartError;

/// Per-layer projection roles; real-mode compute binds projection
/// operators to tensors by this order.
pub const PROJECTION_ROLES: [&str; 7] = [
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_layers: u32,
    /// Weights per channel (`D`).
    pub rows: u32,
    /// Output channels (`C`).
    pub cols: u32,
    pub avg_bits: f64,
    #[serde(default = "default_tensors_per_layer")]
    pub tensors_per_layer: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_register_width")]
    pub register_width: u32,
    #[serde(default)]
    pub smoothing: bool,
}

fn default_tensors_per_layer() -> usize {
    PROJECTION_ROLES.len()
}

fn default_register_width() -> u32 {
    crate::pack::DEFAULT_REGISTER_WIDTH
}

fn tensor_name(layer: u32, index: usize, per_layer: usize) -> String {
    if per_layer == PROJECTION_ROLES.len() {
        format!("layers.{layer}.{}.weight", PROJECTION_ROLES[index])
    } else {
        format!("layers.{layer}.t{index}.weight")
    }
}

/// Builds a Gaussian-weight archive and its quantized, packed form.
/// Identical specs produce byte-identical artifacts.
pub fn generate_synthetic_model(
    spec: &SynthSpec,
) -> Result<(TensorArchive, QuantizedPackedModel), ColdStartError> {
    if spec.n_layers == 0 || spec.rows == 0 || spec.cols == 0 || spec.tensors_per_layer == 0 {
        return Err(ColdStartError::BadConfig(
            "synthetic model dimensions must be positive".into(),
        ));
    }
    let mut tensors = Vec::new();
    for layer in 0..spec.n_layers {
        for i in 0..spec.tensors_per_layer {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed
                    ^ ((layer as u64) << 32)
                    ^ ((i as u64) << 16)
                    ^ 0x5EED_0000,
            );
            // vary channel magnitudes so the bit allocation has structure
            let channel_scale: Vec<f64> = (0..spec.cols)
                .map(|_| rng.gen_range(0.2..2.0))
                .collect();
            let mut data = Vec::with_capacity((spec.rows * spec.cols) as usize);
            for _ in 0..spec.rows {
                for c in 0..spec.cols as usize {
                    let v: f64 = rng.sample(StandardNormal);
                    data.push((v * channel_scale[c]) as f32);
                }
            }
            tensors.push(ArchiveTensor {
                name: tensor_name(layer, i, spec.tensors_per_layer),
                layer,
                rows: spec.rows,
                cols: spec.cols,
                dtype: DType::F32,
                data,
            });
        }
    }
    let archive = TensorArchive::new(tensors)?;

    let config = QuantConfig {
        avg_bits: spec.avg_bits,
        register_width: spec.register_width,
        smoothing: spec.smoothing,
        ..Default::default()
    };
    let calib = spec
        .smoothing
        .then(|| synthesize_calibration(&archive, 8, spec.seed));
    let model = quantize_model(&archive, &config, calib.as_ref())?;
    Ok((archive, model))
}
