//! Per-tensor symmetric 8-bit activation quantization.

use crate::error::{Error, Result};
use crate::quant::round_away;

/// Signed 8-bit activation vector with its codes-per-unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivation {
    pub codes: Vec<i8>,
    /// Codes per unit: `code = round(x * scale)`. Positive (1.0 for
    /// all-zero input).
    pub scale: f32,
}

impl QuantizedActivation {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Dequantize to `code * (1/scale)`.
    pub fn dequantize(&self) -> Vec<f32> {
        let inv = 1.0 / self.scale;
        self.codes.iter().map(|&c| c as f32 * inv).collect()
    }
}

/// Quantize an activation vector with per-tensor absmax:
/// `scale = 127 / max|x|`, codes clamped to [-127, 127].
pub fn quantize_activation(x: &[f32]) -> Result<QuantizedActivation> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty activation vector".into()));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite activation {bad}")));
    }
    let absmax = x.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if absmax == 0.0 {
        return Ok(QuantizedActivation {
            codes: vec![0; x.len()],
            scale: 1.0,
        });
    }
    let scale = 127.0 / absmax;
    let codes = x
        .iter()
        .map(|&v| round_away(v * scale).clamp(-127, 127) as i8)
        .collect();
    Ok(QuantizedActivation { codes, scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_input() {
        let q = quantize_activation(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.codes, vec![0, 0, 0]);
    }

    #[test]
    fn forced_scale_and_rounding() {
        // absmax 2.0 -> scale 63.5; -1.0 * 63.5 = -63.5 rounds away to -64
        let q = quantize_activation(&[2.0, -1.0]).unwrap();
        assert_eq!(q.scale, 63.5);
        assert_eq!(q.codes, vec![127, -64]);
    }

    #[test]
    fn empty_and_nan_rejected() {
        assert!(quantize_activation(&[]).is_err());
        assert!(quantize_activation(&[f32::NAN]).is_err());
    }
}
