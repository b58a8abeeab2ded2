//! Activation-to-weight smoothing and alpha calibration.
//!
//! The transform `W' = diag(s_in^alpha) * W * diag(s_out^-beta)` moves
//! inter-channel variance of the activations into the weights, where the
//! adaptive bit allocation can absorb it. The exponents are restored at
//! matmul time, so the transform is free at runtime.

use super::{
    allocate_bits, channel_stats, dequantize_channel, quantize_channel, Matrix, QuantConfig,
    QuantError, ACTIVATION_EPSILON,
};

/// Per-channel smoothing factors for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingVectors {
    /// Per-input-channel max-abs over calibration (length `D`).
    pub s_in: Vec<f64>,
    /// Per-output-channel max-abs of the calibration outputs (length `C`).
    pub s_out: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl SmoothingVectors {
    pub fn validate(&self) -> Result<(), QuantError> {
        if self.s_in.iter().chain(&self.s_out).any(|&v| v <= 0.0) {
            return Err(QuantError::NonPositiveSmoothing);
        }
        Ok(())
    }
}

/// Applies `W'[j][i] = s_in[j]^alpha * W[j][i] * s_out[i]^-beta`.
pub fn smooth_tensor(w: &Matrix, sv: &SmoothingVectors) -> Result<Matrix, QuantError> {
    sv.validate()?;
    if sv.s_in.len() != w.rows() || sv.s_out.len() != w.cols() {
        return Err(QuantError::DimensionMismatch(format!(
            "smoothing vectors {}/{} for a {}x{} tensor",
            sv.s_in.len(),
            sv.s_out.len(),
            w.rows(),
            w.cols()
        )));
    }
    let row_f: Vec<f64> = sv.s_in.iter().map(|s| s.powf(sv.alpha)).collect();
    let col_f: Vec<f64> = sv.s_out.iter().map(|s| s.powf(-sv.beta)).collect();
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for j in 0..w.rows() {
        for i in 0..w.cols() {
            out.set(j, i, row_f[j] * w.get(j, i) * col_f[i]);
        }
    }
    Ok(out)
}

/// Profiles calibration inputs: per-input-channel max-abs (clamped away
/// from zero) and the static per-tensor INT8 activation scale.
pub fn profile_activation_stats(
    calib_inputs: &[Vec<f64>],
) -> Result<(Vec<f64>, f64), QuantError> {
    let first = calib_inputs.first().ok_or(QuantError::EmptyCalibration)?;
    let dim = first.len();
    if dim == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    if calib_inputs.iter().any(|s| s.len() != dim) {
        return Err(QuantError::DimensionMismatch(
            "calibration samples have mixed lengths".into(),
        ));
    }
    let mut s_in = vec![0.0f64; dim];
    let mut global = 0.0f64;
    for sample in calib_inputs {
        for (j, &x) in sample.iter().enumerate() {
            let a = x.abs();
            s_in[j] = s_in[j].max(a);
            global = global.max(a);
        }
    }
    for v in &mut s_in {
        *v = v.max(ACTIVATION_EPSILON);
    }
    Ok((s_in, global.max(ACTIVATION_EPSILON) / 127.0))
}

/// Quantizes a matrix per-tensor to INT8 and maps it back, simulating the
/// static activation quantization.
pub(crate) fn fake_quantize_per_tensor(m: &Matrix, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let q = (m.get(i, j) / scale).round_ties_even().clamp(-127.0, 127.0);
            out.set(i, j, q * scale);
        }
    }
    out
}

/// Quantizes every column of `w` under the config budget and maps the
/// codes back, returning the dequantized weight matrix.
pub(crate) fn fake_quantize_weights(w: &Matrix, budget: usize) -> Result<Matrix, QuantError> {
    let stats: Vec<_> = (0..w.cols())
        .map(|i| channel_stats(&w.column(i)))
        .collect::<Result<_, _>>()?;
    let alloc = allocate_bits(&stats, budget)?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.cols() {
        let qc = quantize_channel(&w.column(i), alloc.bits[i])?;
        out.set_column(i, &dequantize_channel(&qc)?);
    }
    Ok(out)
}

/// Output MSE of the simulated quantized matmul at one smoothing exponent.
///
/// Builds the smoothing vectors from the calibration data, smooths,
/// allocates bits, quantizes weights per-channel and the (smoothed)
/// inputs per-tensor INT8, and compares the restored product against the
/// exact one.
pub fn smoothing_grid_error(
    w: &Matrix,
    calib_inputs: &[Vec<f64>],
    alpha: f64,
    config: &QuantConfig,
) -> Result<f64, QuantError> {
    let (s_in, _) = profile_activation_stats(calib_inputs)?;
    if s_in.len() != w.rows() {
        return Err(QuantError::DimensionMismatch(format!(
            "calibration dim {} vs tensor rows {}",
            s_in.len(),
            w.rows()
        )));
    }
    let inputs = Matrix::from_rows(calib_inputs)?;
    let exact = inputs.matmul(w)?;

    let s_out: Vec<f64> = (0..exact.cols())
        .map(|i| {
            exact
                .column(i)
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.abs()))
                .max(ACTIVATION_EPSILON)
        })
        .collect();
    let sv = SmoothingVectors {
        s_in,
        s_out: s_out.clone(),
        alpha,
        beta: config.beta,
    };

    let smoothed = smooth_tensor(w, &sv)?;
    let wq = fake_quantize_weights(&smoothed, config.tensor_budget(w.cols()))?;

    let inv_in: Vec<f64> = sv.s_in.iter().map(|s| s.powf(-alpha)).collect();
    let smoothed_inputs = inputs.scaled_cols(&inv_in)?;
    let act_scale = smoothed_inputs.max_abs().max(ACTIVATION_EPSILON) / 127.0;
    let inputs_q = fake_quantize_per_tensor(&smoothed_inputs, act_scale);

    let restore: Vec<f64> = s_out.iter().map(|s| s.powf(config.beta)).collect();
    let simulated = inputs_q.matmul(&wq)?.scaled_cols(&restore)?;
    exact.mse(&simulated)
}

/// Grid step to grid points `{0, step, ..., 1}`; the step must divide 1.
pub(crate) fn alpha_grid(step: f64) -> Result<Vec<f64>, QuantError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(QuantError::BadGridStep(step));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(QuantError::BadGridStep(step));
    }
    Ok((0..=n as usize).map(|k| k as f64 * step).collect())
}

/// Grid search for the smoothing exponent minimizing the output MSE.
/// Ties resolve to the smaller alpha.
pub fn calibrate_alpha(
    w: &Matrix,
    calib_inputs: &[Vec<f64>],
    config: &QuantConfig,
) -> Result<f64, QuantError> {
    let grid = alpha_grid(config.alpha_grid_step)?;
    let mut best_alpha = f64::NAN;
    let mut best_err = f64::INFINITY;
    for alpha in grid {
        let err = smoothing_grid_error(w, calib_inputs, alpha, config)?;
        if err < best_err {
            best_err = err;
            best_alpha = alpha;
        }
    }
    Ok(best_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_exponents_leave_tensor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = random_matrix(&mut rng, 6, 4);
        let sv = SmoothingVectors {
            s_in: (0..6).map(|_| rng.gen_range(0.1..3.0)).collect(),
            s_out: (0..4).map(|_| rng.gen_range(0.1..3.0)).collect(),
            alpha: 0.0,
            beta: 0.0,
        };
        assert_eq!(smooth_tensor(&w, &sv).unwrap(), w);
    }

    #[test]
    fn unit_vectors_leave_tensor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = random_matrix(&mut rng, 5, 3);
        for (alpha, beta) in [(0.3, 1.0), (1.0, 0.5), (0.7, 2.0)] {
            let sv = SmoothingVectors {
                s_in: vec![1.0; 5],
                s_out: vec![1.0; 3],
                alpha,
                beta,
            };
            assert_eq!(smooth_tensor(&w, &sv).unwrap(), w);
        }
    }

    #[test]
    fn smoothing_product_identity() {
        // (I * diag(s_in^-a)) * W' * diag(s_out^b) == I * W up to fp noise
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let (n, d, c) = (4, 8, 5);
            let inputs = random_matrix(&mut rng, n, d);
            let w = random_matrix(&mut rng, d, c);
            let sv = SmoothingVectors {
                s_in: (0..d).map(|_| rng.gen_range(0.05..4.0)).collect(),
                s_out: (0..c).map(|_| rng.gen_range(0.05..4.0)).collect(),
                alpha: 0.5,
                beta: 1.0,
            };
            let smoothed = smooth_tensor(&w, &sv).unwrap();
            let inv_in: Vec<f64> = sv.s_in.iter().map(|s| s.powf(-sv.alpha)).collect();
            let restore: Vec<f64> = sv.s_out.iter().map(|s| s.powf(sv.beta)).collect();
            let recon = inputs
                .scaled_cols(&inv_in)
                .unwrap()
                .matmul(&smoothed)
                .unwrap()
                .scaled_cols(&restore)
                .unwrap();
            let exact = inputs.matmul(&w).unwrap();
            let mut diff = 0.0f64;
            for (a, b) in exact.data().iter().zip(recon.data()) {
                diff += (a - b) * (a - b);
            }
            let rel = diff.sqrt() / exact.frobenius_norm();
            assert!(rel < 1e-4, "relative frobenius error {rel}");
        }
    }

    #[test]
    fn rejects_bad_vectors() {
        let w = Matrix::zeros(2, 2);
        let sv = SmoothingVectors {
            s_in: vec![1.0, 0.0],
            s_out: vec![1.0, 1.0],
            alpha: 0.5,
            beta: 1.0,
        };
        assert!(matches!(
            smooth_tensor(&w, &sv),
            Err(QuantError::NonPositiveSmoothing)
        ));
        let sv = SmoothingVectors {
            s_in: vec![1.0],
            s_out: vec![1.0, 1.0],
            alpha: 0.5,
            beta: 1.0,
        };
        assert!(matches!(
            smooth_tensor(&w, &sv),
            Err(QuantError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn profile_fixtures() {
        let (s_in, scale) = profile_activation_stats(&[vec![1.0, -2.0]]).unwrap();
        assert_eq!(s_in, vec![1.0, 2.0]);
        assert_eq!(scale, 2.0 / 127.0);
        let (s_in, scale) = profile_activation_stats(&[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(s_in.iter().all(|&v| v == ACTIVATION_EPSILON));
        assert_eq!(scale, ACTIVATION_EPSILON / 127.0);
        assert!(profile_activation_stats(&[]).is_err());
    }

    #[test]
    fn profile_is_monotone_in_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut samples: Vec<Vec<f64>> = Vec::new();
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..30 {
            samples.push((0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            let (s_in, _) = profile_activation_stats(&samples).unwrap();
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&s_in) {
                    assert!(b >= a);
                }
            }
            prev = Some(s_in);
        }
    }

    #[test]
    fn grid_points() {
        assert_eq!(alpha_grid(0.5).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(alpha_grid(0.05).unwrap().len(), 21);
        assert_eq!(*alpha_grid(0.05).unwrap().last().unwrap(), 1.0);
        assert!(alpha_grid(0.3).is_err());
        assert!(alpha_grid(0.0).is_err());
    }

    #[test]
    fn flat_error_curve_ties_to_zero() {
        // all-ones inputs and identical columns: s_in = 1 so alpha has no
        // effect and every grid point evaluates to the same error
        let col = vec![0.4, -0.2, 0.7, 0.1];
        let mut w = Matrix::zeros(4, 3);
        for i in 0..3 {
            w.set_column(i, &col);
        }
        let calib = vec![vec![1.0; 4], vec![-1.0; 4]];
        let cfg = QuantConfig {
            avg_bits: 4.0,
            alpha_grid_step: 0.25,
            ..Default::default()
        };
        assert_eq!(calibrate_alpha(&w, &calib, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn calibrated_alpha_attains_grid_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..5 {
            let (n, d, c) = (6, 10, 4);
            let inputs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64))
                        .collect()
                })
                .collect();
            let w = random_matrix(&mut rng, d, c);
            let cfg = QuantConfig {
                avg_bits: 3.0,
                alpha_grid_step: 0.25,
                ..Default::default()
            };
            let alpha = calibrate_alpha(&w, &inputs, &cfg).unwrap();
            let best = smoothing_grid_error(&w, &inputs, alpha, &cfg).unwrap();
            for k in 0..=4 {
                let a = k as f64 * 0.25;
                let err = smoothing_grid_error(&w, &inputs, a, &cfg).unwrap();
                assert!(
                    err >= best,
                    "alpha {a} has error {err} < chosen {alpha}'s {best}"
                );
                if err == best {
                    assert!(alpha <= a, "tie should resolve to the smaller alpha");
                }
            }
        }
    }
}
