//! Uniform fake quantization and element-wise gradient scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Quantization interval `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl ClipRange {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(Error::arg(format!("invalid clip range [{low}, {high}]")));
        }
        Ok(ClipRange { low, high })
    }
}

/// Quantization-aware training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Gradient scaling factor; 0 reduces to the straight-through estimator.
    pub delta: f64,
    /// Per weight-layer clip ranges, frozen before training.
    #[serde(default)]
    pub weight_clips: BTreeMap<String, ClipRange>,
    /// Per ReLU-layer activation ranges (low is 0).
    #[serde(default)]
    pub act_clips: BTreeMap<String, ClipRange>,
    /// Skip gradient scaling entirely and pass gradients through unchanged.
    #[serde(default)]
    pub straight_through: bool,
}

impl QatConfig {
    pub const DEFAULT_DELTA: f64 = 0.2;

    pub fn new(weight_bits: u32, act_bits: u32, delta: f64) -> Result<Self> {
        let cfg = QatConfig {
            weight_bits,
            act_bits,
            delta,
            weight_clips: BTreeMap::new(),
            act_clips: BTreeMap::new(),
            straight_through: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.act_bits)?;
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::arg(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        for c in self.weight_clips.values().chain(self.act_clips.values()) {
            ClipRange::new(c.low, c.high)?;
        }
        Ok(())
    }

    /// Maps a gradient w.r.t. quantized values back to latent values.
    pub fn backward(&self, g_q: &[f64], x: &[f64], x_q: &[f64]) -> Result<Vec<f64>> {
        if self.straight_through {
            return Ok(g_q.to_vec());
        }
        ewgs_scale_gradients(g_q, x, x_q, self.delta)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=24).contains(&bits) {
        return Err(Error::arg(format!("bit width must be in 1..=24, got {bits}")));
    }
    Ok(())
}

/// A uniform grid of `2^bits` levels spanning `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantizer {
    low: f64,
    high: f64,
    step: f64,
    max_level: u32,
}

impl UniformQuantizer {
    pub fn new(bits: u32, range: ClipRange) -> Result<Self> {
        check_bits(bits)?;
        let range = ClipRange::new(range.low, range.high)?;
        let max_level = (1u32 << bits) - 1;
        Ok(UniformQuantizer {
            low: range.low,
            high: range.high,
            step: (range.high - range.low) / f64::from(max_level),
            max_level,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn level(&self, x: f64) -> u32 {
        let t = ((x.clamp(self.low, self.high) - self.low) / self.step).round();
        (t.max(0.0) as u32).min(self.max_level)
    }

    pub fn value(&self, level: u32) -> f64 {
        self.low + f64::from(level) * self.step
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.value(self.level(x))
    }
}

/// Quantize-then-dequantize `x` on `2^bits` uniform levels over `[low, high]`.
/// Returns the dequantized values and their integer levels.
pub fn fake_quantize(x: &[f64], bits: u32, low: f64, high: f64) -> Result<(Vec<f64>, Vec<u32>)> {
    let q = UniformQuantizer::new(bits, ClipRange { low, high })?;
    let levels: Vec<u32> = x.iter().map(|&v| q.level(v)).collect();
    let values = levels.iter().map(|&l| q.value(l)).collect();
    Ok((values, levels))
}

/// Element-wise gradient scaling:
/// `g_x = g_q * (1 + delta * sign(g_q) * (x - x_q))`.
pub fn ewgs_scale_gradients(g_q: &[f64], x: &[f64], x_q: &[f64], delta: f64) -> Result<Vec<f64>> {
    if g_q.len() != x.len() || x.len() != x_q.len() {
        return Err(Error::shape(format!(
            "gradient scaling buffers differ: {}, {}, {}",
            g_q.len(),
            x.len(),
            x_q.len()
        )));
    }
    Ok(g_q
        .iter()
        .zip(x)
        .zip(x_q)
        .map(|((&g, &x), &xq)| ewgs_scalar(g, x, xq, delta))
        .collect())
}

#[inline]
pub(crate) fn ewgs_scalar(g: f64, x: f64, xq: f64, delta: f64) -> f64 {
    let sign = if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    };
    g * (1.0 + delta * sign * (x - xq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_bit_grid() {
        let (v, l) = fake_quantize(&[0.3, -0.3, 5.0, -5.0], 1, -1.0, 1.0).unwrap();
        assert_eq!(v, vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(l, vec![1, 0, 1, 0]);
    }

    #[test]
    fn grid_values_are_fixed_points() {
        let (v, _) = fake_quantize(&[-0.2, 0.0, 0.77], 3, -1.0, 1.0).unwrap();
        let (w, _) = fake_quantize(&v, 3, -1.0, 1.0).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn invalid_ranges_and_bits() {
        assert!(fake_quantize(&[0.0], 4, 1.0, 1.0).is_err());
        assert!(fake_quantize(&[0.0], 4, 2.0, 1.0).is_err());
        assert!(fake_quantize(&[0.0], 0, 0.0, 1.0).is_err());
        assert!(QatConfig::new(8, 8, -0.1).is_err());
        assert!(QatConfig::new(8, 8, f64::NAN).is_err());
    }

    #[test]
    fn gradient_scaling_examples() {
        let g = ewgs_scale_gradients(&[0.5, -0.5], &[0.2, 0.2], &[0.0, 0.0], 1.0).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15);
        assert!((g[1] + 0.4).abs() < 1e-15);
        let g_q = [0.3, -1.7, 0.0, 2.5];
        let x = [0.1, 0.9, -0.4, 0.33];
        let xq = [0.0, 1.0, -0.5, 0.25];
        assert_eq!(ewgs_scale_gradients(&g_q, &x, &xq, 0.0).unwrap(), g_q.to_vec());
        assert!(ewgs_scale_gradients(&g_q, &x[..3], &xq, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn eight_bit_error_within_half_step(x in prop::collection::vec(-2.0f64..3.0, 1..64)) {
            let (lo, hi) = (-2.0, 3.0);
            let step = (hi - lo) / 255.0;
            let (v, _) = fake_quantize(&x, 8, lo, hi).unwrap();
            for (a, b) in x.iter().zip(&v) {
                prop_assert!((a - b).abs() <= step / 2.0 + 1e-12);
            }
        }

        #[test]
        fn fake_quantize_is_idempotent(x in prop::collection::vec(-5.0f64..5.0, 1..64), bits in 1u32..12) {
            let (v, l) = fake_quantize(&x, bits, -1.5, 2.0).unwrap();
            let (w, m) = fake_quantize(&v, bits, -1.5, 2.0).unwrap();
            prop_assert_eq!(v, w);
            prop_assert_eq!(l, m);
        }

        #[test]
        fn scaling_preserves_sign_when_error_small(
            g in -10.0f64..10.0,
            err in -1.0f64..1.0,
            delta in 0.0f64..0.99,
        ) {
            let out = ewgs_scale_gradients(&[g], &[err], &[0.0], delta).unwrap()[0];
            prop_assert!(out == 0.0 && g == 0.0 || out.signum() == g.signum());
        }
    }
}
