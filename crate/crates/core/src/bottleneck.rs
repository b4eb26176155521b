//! The entropy bottleneck layer.
//!
//! At evaluation time the feature activations are rounded to integers and
//! entropy coded. At training time the rate path sees the features plus
//! uniform noise in (-1/2, 1/2) while the task path sees the rounded values
//! with a straight-through gradient: backward treats rounding as identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::RateReport;
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Trade-off weight and channel count for one bottleneck.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckConfig {
    pub lambda: f64,
    pub channels: usize,
}

impl BottleneckConfig {
    pub fn new(lambda: f64, channels: usize) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(BottleneckConfig { lambda, channels })
    }
}

/// Task loss, rate, and their weighted sum for one step or one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub task_loss: f64,
    pub rate_bits: f64,
    pub total: f64,
}

/// Round to nearest integer, ties away from zero, as coder symbols.
pub fn quantize(z: &Tensor) -> Result<IntTensor> {
    let mut data = Vec::with_capacity(z.numel());
    for &v in z.data() {
        let r = v.round();
        if !r.is_finite() || r.abs() > i32::MAX as f64 {
            return Err(Error::SymbolOverflow(v));
        }
        data.push(r as i32);
    }
    Ok(IntTensor { shape: z.shape().to_vec(), data })
}

/// Deterministic per-step noise stream. The key mixes the run seed, the
/// step index, and a domain tag so other consumers of the seed never share
/// a stream with the noise.
pub fn noise_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(b"bn-noise");
    ChaCha8Rng::from_seed(key)
}

/// Training-time forward: `(z + u, round(z))`.
///
/// The first output feeds the rate model (fully differentiable, gradient of
/// the sum passes through unchanged). The second feeds the task head; its
/// backward contract is identity, so callers propagate head gradients onto
/// `z` without any masking.
pub fn train_forward(z: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, IntTensor)> {
    z.ensure_finite("bottleneck input")?;
    let mut noisy = Vec::with_capacity(z.numel());
    for &v in z.data() {
        let u: f64 = rng.gen::<f64>() - 0.5;
        noisy.push(v + u);
    }
    let z_for_rate = Tensor::new(z.shape().to_vec(), noisy)?;
    let z_for_head = quantize(z)?;
    Ok((z_for_rate, z_for_head))
}

/// total = task_loss + lambda * rate.total_bits
pub fn combined_loss(task_loss: f64, rate: &RateReport, config: &BottleneckConfig) -> LossReport {
    let total = task_loss + config.lambda * rate.total_bits;
    LossReport { task_loss, rate_bits: rate.total_bits, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_ties_away_from_zero() {
        let z = Tensor::new(vec![5], vec![1.4, -2.5, 0.5, -0.5, 2.5]).unwrap();
        let q = quantize(&z).unwrap();
        assert_eq!(q.data, vec![1, -3, 1, -1, 3]);
    }

    #[test]
    fn quantize_keeps_integers() {
        let z = Tensor::new(vec![4], vec![-7.0, 0.0, 3.0, 2147483647.0]).unwrap();
        let q = quantize(&z).unwrap();
        assert_eq!(q.data, vec![-7, 0, 3, i32::MAX]);
    }

    #[test]
    fn quantize_overflow_is_an_error() {
        let z = Tensor::new(vec![1], vec![3e9]).unwrap();
        assert!(matches!(quantize(&z), Err(Error::SymbolOverflow(_))));
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        let z = Tensor::new(vec![2, 3], vec![0.3, -1.7, 4.2, 0.0, 9.9, -0.5]).unwrap();
        let (a, _) = train_forward(&z, &mut noise_rng(7, 13)).unwrap();
        for (n, v) in a.data().iter().zip(z.data()) {
            assert!((n - v).abs() <= 0.5);
        }
        let (b, _) = train_forward(&z, &mut noise_rng(7, 13)).unwrap();
        assert_eq!(a.data(), b.data());
        let (c, _) = train_forward(&z, &mut noise_rng(7, 14)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn combined_loss_arithmetic() {
        let rate = RateReport { total_bits: 10.0, per_channel_bits: vec![10.0] };
        let cfg = BottleneckConfig::new(0.1, 1).unwrap();
        let report = combined_loss(2.0, &rate, &cfg);
        assert!((report.total - 3.0).abs() < 1e-12);

        let cfg0 = BottleneckConfig::new(0.0, 1).unwrap();
        let r0 = combined_loss(2.0, &rate, &cfg0);
        assert_eq!(r0.total, r0.task_loss);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(BottleneckConfig::new(-0.1, 4).is_err());
    }

    /// Straight-through contract, dual construction: the head loss computed
    /// on round(z) equals the loss computed on z + detach(round(z) - z), and
    /// so do the gradients that flow back to z, bitwise.
    #[test]
    fn straight_through_matches_additive_detour_graph() {
        use crate::tensor::{dense_backward, dense_forward, softmax_cross_entropy};
        use rand::Rng;

        let mut rng = noise_rng(3, 0);
        for _ in 0..20 {
            let z = Tensor::new(
                vec![4, 6],
                (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>(),
            )
            .unwrap();
            let w = Tensor::new(
                vec![6, 3],
                (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
            .unwrap();
            let bias = Tensor::zeros(vec![3]);
            let labels = [0usize, 1, 2, 1];

            // path A: rounded forward, straight-through backward
            let z_head = quantize(&z).unwrap().to_tensor();
            let logits_a = dense_forward(&z_head, &w, &bias).unwrap();
            let (loss_a, dlogits_a) = softmax_cross_entropy(&logits_a, &labels).unwrap();
            let (dz_a, _, _) = dense_backward(&z_head, &w, &dlogits_a);

            // path B: z + detached(round(z) - z); backward sees identity
            let detour: Vec<f64> = z
                .data()
                .iter()
                .zip(z_head.data())
                .map(|(&zv, &q)| zv + (q - zv))
                .collect();
            let z_b = Tensor::new(z.shape().to_vec(), detour).unwrap();
            let logits_b = dense_forward(&z_b, &w, &bias).unwrap();
            let (loss_b, dlogits_b) = softmax_cross_entropy(&logits_b, &labels).unwrap();
            let (dz_b, _, _) = dense_backward(&z_b, &w, &dlogits_b);

            assert_eq!(loss_a.to_bits(), loss_b.to_bits());
            for (a, b) in dz_a.data().iter().zip(dz_b.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    /// Coarser quantization grids cannot increase the number of distinct
    /// symbols: round(z / s) over fixed data, distinct counts non-increasing
    /// in s.
    #[test]
    fn scaling_down_reduces_distinct_states() {
        use std::collections::BTreeSet;
        let mut rng = noise_rng(11, 2);
        let data: Vec<f64> = (0..512).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let mut last = usize::MAX;
        for s in [1.0, 2.0, 4.0, 8.0, 16.0, 64.0] {
            let scaled = Tensor::new(
                vec![512],
                data.iter().map(|v| v / s).collect::<Vec<f64>>(),
            )
            .unwrap();
            let q = quantize(&scaled).unwrap();
            let distinct: BTreeSet<i32> = q.data.iter().cloned().collect();
            assert!(distinct.len() <= last, "s={s}: {} > {last}", distinct.len());
            last = distinct.len();
        }
        assert!(last <= 2);
    }
}
