//! Block-wise post-training quantization codecs.
//!
//! Weights are quantized per sub-block with symmetric absmax scaling:
//! a block with `b`-bit codes spans `2^b - 1` levels in
//! `[-(2^(b-1)-1), +(2^(b-1)-1)]` and the scale is
//! `s = (2^(b-1)-1) / max|w|`. Sub-block steps (`1/s`) are themselves
//! quantized against a per-super-block half-precision scale, so a stored
//! sub-block step is `sub_scale_code * super_scale`.
//!
//! Packed super-block layout (little-endian, LSB-first bitstreams):
//!
//! | format | weights        | sub-scale codes | super scale | bytes/256w |
//! |--------|----------------|-----------------|-------------|------------|
//! | Q2K    | 256 x 2 bit    | 16 x 4 bit      | f16         | 74         |
//! | Q4K    | 256 x 4 bit    | 8 x 6 bit       | f16         | 136        |
//! | Q6K    | 256 x 6 bit    | 16 x 8 bit      | f16         | 210        |
//! | Q8     | 32 x 8 bit     | none (flat)     | f16 step    | 34 (per 32)|

pub mod activation;
pub mod bitpack;
pub mod ternary;

use half::f16;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Storage format identifier for a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantFormat {
    /// Full-precision reference (no quantization).
    F32Ref,
    /// 8-bit codes in flat 32-weight blocks, one f16 step per block.
    Q8,
    /// 6-bit codes, 16 sub-blocks of 16 weights, 8-bit sub scales.
    Q6K,
    /// 4-bit codes, 8 sub-blocks of 32 weights, 6-bit sub scales.
    Q4K,
    /// 2-bit codes, 16 sub-blocks of 16 weights, 4-bit sub scales.
    Q2K,
    /// Ternary weights {-1, 0, +1} with a per-tensor scale.
    T158,
}

impl QuantFormat {
    /// Stable on-disk id.
    pub fn id(self) -> u8 {
        match self {
            QuantFormat::F32Ref => 0,
            QuantFormat::Q8 => 1,
            QuantFormat::Q6K => 2,
            QuantFormat::Q4K => 3,
            QuantFormat::Q2K => 4,
            QuantFormat::T158 => 5,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => QuantFormat::F32Ref,
            1 => QuantFormat::Q8,
            2 => QuantFormat::Q6K,
            3 => QuantFormat::Q4K,
            4 => QuantFormat::Q2K,
            5 => QuantFormat::T158,
            other => return Err(Error::UnsupportedFormat(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantFormat::F32Ref => "f32",
            QuantFormat::Q8 => "q8",
            QuantFormat::Q6K => "q6k",
            QuantFormat::Q4K => "q4k",
            QuantFormat::Q2K => "q2k",
            QuantFormat::T158 => "t1_58",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "f32" | "f32_ref" => QuantFormat::F32Ref,
            "q8" => QuantFormat::Q8,
            "q6k" | "q6_k" => QuantFormat::Q6K,
            "q4k" | "q4_k" => QuantFormat::Q4K,
            "q2k" | "q2_k" => QuantFormat::Q2K,
            "t1_58" | "q1_58" | "t158" | "ternary" => QuantFormat::T158,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown format '{other}' (expected f32, q8, q6k, q4k, q2k or t1_58)"
                )))
            }
        })
    }

    /// True for the block codec formats handled by [`quantize_tensor`].
    pub fn is_kquant(self) -> bool {
        matches!(
            self,
            QuantFormat::Q8 | QuantFormat::Q6K | QuantFormat::Q4K | QuantFormat::Q2K
        )
    }
}

/// Block-layout descriptor for one k-quant format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub format: QuantFormat,
    /// Weight code width in bits.
    pub bits_per_weight: u32,
    /// Weights per sub-block.
    pub sub_block_size: usize,
    /// Sub-blocks per super-block (1 = flat blocks, no sub scales).
    pub sub_blocks_per_super: usize,
    /// Sub-scale code width in bits (0 = no stored sub scales).
    pub sub_scale_bits: u32,
    /// Super scale is stored with IEEE half-precision semantics.
    pub super_scale_is_f16: bool,
}

impl QuantSpec {
    /// Canonical layout for a k-quant format.
    pub fn for_format(format: QuantFormat) -> Result<Self> {
        let spec = match format {
            QuantFormat::Q2K => QuantSpec {
                format,
                bits_per_weight: 2,
                sub_block_size: 16,
                sub_blocks_per_super: 16,
                sub_scale_bits: 4,
                super_scale_is_f16: true,
            },
            QuantFormat::Q4K => QuantSpec {
                format,
                bits_per_weight: 4,
                sub_block_size: 32,
                sub_blocks_per_super: 8,
                sub_scale_bits: 6,
                super_scale_is_f16: true,
            },
            QuantFormat::Q6K => QuantSpec {
                format,
                bits_per_weight: 6,
                sub_block_size: 16,
                sub_blocks_per_super: 16,
                sub_scale_bits: 8,
                super_scale_is_f16: true,
            },
            QuantFormat::Q8 => QuantSpec {
                format,
                bits_per_weight: 8,
                sub_block_size: 32,
                sub_blocks_per_super: 1,
                sub_scale_bits: 0,
                super_scale_is_f16: true,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a block codec format",
                    other.name()
                )))
            }
        };
        Ok(spec)
    }

    /// Weights covered by one super-block.
    pub fn super_block_width(&self) -> usize {
        self.sub_block_size * self.sub_blocks_per_super
    }

    /// Largest emitted code magnitude: `2^(b-1) - 1`.
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits_per_weight - 1)) - 1
    }

    /// Largest sub-scale code, or 1 for flat-block formats.
    pub fn sub_scale_max(&self) -> u32 {
        if self.sub_scale_bits == 0 {
            1
        } else {
            (1 << self.sub_scale_bits) - 1
        }
    }

    /// Packed byte size of one super-block.
    pub fn packed_super_block_bytes(&self) -> usize {
        let scale_bytes = 2; // f16 super scale
        let sub_bytes = if self.sub_scale_bits == 0 {
            0
        } else {
            bitpack::packed_len(self.sub_blocks_per_super, self.sub_scale_bits)
        };
        let weight_bytes =
            bitpack::packed_len(self.super_block_width(), self.bits_per_weight);
        scale_bytes + sub_bytes + weight_bytes
    }

    /// Analytic packed storage cost in bits per weight.
    pub fn stored_bits_per_weight(&self) -> f64 {
        self.packed_super_block_bytes() as f64 * 8.0 / self.super_block_width() as f64
    }
}

/// One quantized super-block: an f16-valued scale, per-sub-block scale
/// codes and bit-packed two's-complement weight codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperBlock {
    /// Non-negative scale, exactly representable in f16.
    pub super_scale: f32,
    /// Unsigned sub-scale codes, one per sub-block (empty for flat formats).
    pub sub_scale_codes: Vec<u8>,
    /// Weight codes, bit-packed per [`bitpack`].
    pub packed_codes: Vec<u8>,
}

impl SuperBlock {
    /// Dequantized step of sub-block `k`: `sub_scale_code * super_scale`.
    #[inline]
    pub fn step(&self, spec: &QuantSpec, k: usize) -> f32 {
        if spec.sub_scale_bits == 0 {
            self.super_scale
        } else {
            self.sub_scale_codes[k] as f32 * self.super_scale
        }
    }

    /// Unpack the weight codes of sub-block `k` into `out`.
    ///
    /// Sub-blocks start byte-aligned for every supported layout
    /// (sub_block_size * bits is a multiple of 8), which the
    /// specialized paths below rely on.
    #[inline]
    pub fn unpack_sub_block(&self, spec: &QuantSpec, k: usize, out: &mut [i32]) {
        debug_assert_eq!(out.len(), spec.sub_block_size);
        let bits = spec.bits_per_weight;
        let base_bit = k * spec.sub_block_size * bits as usize;
        debug_assert_eq!(base_bit % 8, 0);
        let bytes = &self.packed_codes[base_bit / 8..];
        match bits {
            8 => {
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = bytes[j] as i8 as i32;
                }
            }
            4 => {
                for j in 0..out.len() / 2 {
                    let b = bytes[j] as i32;
                    out[2 * j] = (b << 28) >> 28;
                    out[2 * j + 1] = (b << 24) >> 28;
                }
            }
            2 => {
                for j in 0..out.len() / 4 {
                    let b = bytes[j] as i32;
                    out[4 * j] = (b << 30) >> 30;
                    out[4 * j + 1] = (b << 28) >> 30;
                    out[4 * j + 2] = (b << 26) >> 30;
                    out[4 * j + 3] = (b << 24) >> 30;
                }
            }
            6 => {
                // 4 codes per 3 bytes, LSB-first
                for j in 0..out.len() / 4 {
                    let b0 = bytes[3 * j] as i32;
                    let b1 = bytes[3 * j + 1] as i32;
                    let b2 = bytes[3 * j + 2] as i32;
                    out[4 * j] = (b0 << 26) >> 26;
                    out[4 * j + 1] = (((b0 >> 6) | (b1 << 2)) << 26) >> 26;
                    out[4 * j + 2] = (((b1 >> 4) | (b2 << 4)) << 26) >> 26;
                    out[4 * j + 3] = (b2 << 24) >> 26;
                }
            }
            _ => {
                let base = k * spec.sub_block_size;
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = bitpack::read_signed(&self.packed_codes, bits, base + j);
                }
            }
        }
    }
}

/// Bit-packed quantized weight matrix.
///
/// Super-blocks are stored row-major: row `r` owns blocks
/// `[r * blocks_per_row, (r+1) * blocks_per_row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub spec: QuantSpec,
    rows: usize,
    cols: usize,
    pub super_blocks: Vec<SuperBlock>,
}

impl QuantizedTensor {
    /// Assemble from parts, checking the block-count invariant.
    pub fn from_parts(
        spec: QuantSpec,
        rows: usize,
        cols: usize,
        super_blocks: Vec<SuperBlock>,
    ) -> Result<Self> {
        let width = spec.super_block_width();
        if cols == 0 || !cols.is_multiple_of(width) {
            return Err(Error::Layout(format!(
                "cols {cols} not a multiple of super-block width {width}"
            )));
        }
        if super_blocks.len() != rows * cols / width {
            return Err(Error::Layout(format!(
                "{} super-blocks for a {}x{} tensor, expected {}",
                super_blocks.len(),
                rows,
                cols,
                rows * cols / width
            )));
        }
        Ok(Self {
            spec,
            rows,
            cols,
            super_blocks,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.spec.super_block_width()
    }

    /// Super-blocks of row `r`, in column order.
    pub fn row_blocks(&self, r: usize) -> &[SuperBlock] {
        let n = self.blocks_per_row();
        &self.super_blocks[r * n..(r + 1) * n]
    }

    /// Total packed payload size in bytes.
    pub fn packed_bytes(&self) -> usize {
        self.super_blocks.len() * self.spec.packed_super_block_bytes()
    }
}

/// Round half away from zero (what `f32::round` does), as i32.
#[inline]
pub(crate) fn round_away(x: f32) -> i32 {
    x.round() as i32
}

/// Round through IEEE half precision, keeping positive values positive.
///
/// Quantization steps below the smallest f16 subnormal are clamped up to
/// it so a non-zero block never collapses to an all-zero reconstruction;
/// values beyond f16 range saturate at f16::MAX.
pub fn to_f16_scale(x: f32) -> f32 {
    if x <= 0.0 {
        return 0.0;
    }
    let r = f16::from_f32(x).to_f32();
    if r <= 0.0 {
        return f16::from_bits(1).to_f32(); // smallest positive subnormal
    }
    if r.is_infinite() {
        return f16::MAX.to_f32();
    }
    r
}

/// Next representable f16 above a positive f16 value, saturating at MAX.
pub fn f16_next_up(x: f32) -> f32 {
    let next = f16::from_bits(f16::from_f32(x).to_bits() + 1);
    if next.is_infinite() {
        f16::MAX.to_f32()
    } else {
        next.to_f32()
    }
}

/// Super scale for a set of sub-block steps: the f16 rounding of
/// `max_step / sub_scale_max`, nudged up so the largest step's code
/// `round(step / super_scale)` never clamps at the top of the code
/// range. Keeps `|step - code * super_scale| <= super_scale / 2` for
/// every sub-block, which the round-trip error bound relies on.
pub fn super_scale_for_steps(max_step: f32, sub_scale_max: u32) -> f32 {
    let mut super_scale = to_f16_scale(max_step / sub_scale_max as f32);
    if super_scale > 0.0 {
        for _ in 0..4 {
            if round_away(max_step / super_scale) <= sub_scale_max as i32 {
                break;
            }
            let bumped = f16_next_up(super_scale);
            if bumped <= super_scale {
                break; // saturated at f16::MAX
            }
            super_scale = bumped;
        }
    }
    super_scale
}

/// Absmax scale for one block: `(2^(b-1) - 1) / max|w|`, 0 for an
/// all-zero block.
pub fn block_scale(block: &[f32], bits: u32) -> Result<f32> {
    if block.is_empty() {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    if !matches!(bits, 2 | 4 | 6 | 8) {
        return Err(Error::InvalidArgument(format!(
            "unsupported bit width {bits}"
        )));
    }
    let alpha = block.iter().fold(0.0f32, |m, &w| m.max(w.abs()));
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f32;
    Ok(qmax / alpha)
}

/// Quantize a full-precision matrix into the block layout of `spec`.
pub fn quantize_tensor(weights: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if !spec.format.is_kquant() {
        return Err(Error::InvalidArgument(format!(
            "cannot block-quantize to {}",
            spec.format.name()
        )));
    }
    let width = spec.super_block_width();
    if weights.cols() == 0 || !weights.cols().is_multiple_of(width) {
        return Err(Error::Layout(format!(
            "tensor cols {} not a multiple of the {} super-block width {}",
            weights.cols(),
            spec.format.name(),
            width
        )));
    }
    weights.check_finite()?;

    let qmax = spec.qmax() as f32;
    let n_sub = spec.sub_blocks_per_super;
    let mut super_blocks =
        Vec::with_capacity(weights.rows() * weights.cols() / width);

    for r in 0..weights.rows() {
        let row = weights.row(r);
        for chunk in row.chunks_exact(width) {
            super_blocks.push(quantize_super_block(chunk, spec, qmax, n_sub));
        }
    }
    Ok(QuantizedTensor {
        spec: *spec,
        rows: weights.rows(),
        cols: weights.cols(),
        super_blocks,
    })
}

fn quantize_super_block(chunk: &[f32], spec: &QuantSpec, qmax: f32, n_sub: usize) -> SuperBlock {
    // Per-sub-block absmax and exact steps alpha/qmax.
    let mut alphas = vec![0.0f32; n_sub];
    let mut steps = vec![0.0f32; n_sub];
    for (k, sub) in chunk.chunks_exact(spec.sub_block_size).enumerate() {
        let alpha = sub.iter().fold(0.0f32, |m, &w| m.max(w.abs()));
        alphas[k] = alpha;
        steps[k] = alpha / qmax;
    }
    let max_step = steps.iter().fold(0.0f32, |m, &d| m.max(d));

    let (super_scale, sub_scale_codes) = if spec.sub_scale_bits == 0 {
        (to_f16_scale(max_step), Vec::new())
    } else {
        let super_scale = super_scale_for_steps(max_step, spec.sub_scale_max());
        let codes = steps
            .iter()
            .map(|&d| {
                if d == 0.0 || super_scale == 0.0 {
                    0
                } else {
                    (round_away(d / super_scale).clamp(0, spec.sub_scale_max() as i32)) as u8
                }
            })
            .collect();
        (super_scale, codes)
    };

    // Weight codes against the exact (pre-quantization) sub-block scale.
    let mut codes = Vec::with_capacity(chunk.len());
    for (k, sub) in chunk.chunks_exact(spec.sub_block_size).enumerate() {
        if alphas[k] == 0.0 {
            codes.extend(std::iter::repeat_n(0, sub.len()));
        } else {
            let s = qmax / alphas[k];
            for &w in sub {
                let q = round_away(w * s).clamp(-(qmax as i32), qmax as i32);
                codes.push(q);
            }
        }
    }

    SuperBlock {
        super_scale,
        sub_scale_codes,
        packed_codes: bitpack::pack_signed(&codes, spec.bits_per_weight),
    }
}

/// Reconstruct the full-precision matrix `code * step` from a quantized
/// tensor. Deterministic for given codes and scales.
pub fn dequantize_tensor(qt: &QuantizedTensor) -> Matrix {
    let spec = &qt.spec;
    let mut data = Vec::with_capacity(qt.rows() * qt.cols());
    let mut codes = vec![0i32; spec.sub_block_size];
    for r in 0..qt.rows() {
        for sb in qt.row_blocks(r) {
            for k in 0..spec.sub_blocks_per_super {
                let step = sb.step(spec, k);
                sb.unpack_sub_block(spec, k, &mut codes);
                data.extend(codes.iter().map(|&c| c as f32 * step));
            }
        }
    }
    Matrix::new(qt.rows(), qt.cols(), data).expect("block layout preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_scale_matches_formula() {
        // all-zero block
        assert_eq!(block_scale(&[0.0, 0.0, 0.0, 0.0], 4).unwrap(), 0.0);
        // alpha = 2.0, 8-bit: 127/2
        assert_eq!(block_scale(&[-2.0, 1.0], 8).unwrap(), 63.5);
        // alpha = 0.5, 2-bit: (2^1 - 1)/0.5
        assert_eq!(block_scale(&[0.5, -0.25, 0.125], 2).unwrap(), 2.0);
        assert!(block_scale(&[], 4).is_err());
        assert!(block_scale(&[1.0], 3).is_err());
    }

    #[test]
    fn spec_layouts() {
        let q2 = QuantSpec::for_format(QuantFormat::Q2K).unwrap();
        assert_eq!(q2.super_block_width(), 256);
        assert_eq!(q2.packed_super_block_bytes(), 74);
        assert!((q2.stored_bits_per_weight() - 2.3125).abs() < 1e-12);

        let q4 = QuantSpec::for_format(QuantFormat::Q4K).unwrap();
        assert_eq!(q4.super_block_width(), 256);
        assert_eq!(q4.packed_super_block_bytes(), 136);
        assert!((q4.stored_bits_per_weight() - 4.25).abs() < 1e-12);

        let q6 = QuantSpec::for_format(QuantFormat::Q6K).unwrap();
        assert_eq!(q6.packed_super_block_bytes(), 210);
        assert!((q6.stored_bits_per_weight() - 6.5625).abs() < 1e-12);

        let q8 = QuantSpec::for_format(QuantFormat::Q8).unwrap();
        assert_eq!(q8.super_block_width(), 32);
        assert_eq!(q8.packed_super_block_bytes(), 34);
        assert!((q8.stored_bits_per_weight() - 8.5).abs() < 1e-12);
    }

    #[test]
    fn zero_tensor_quantizes_to_zero() {
        let w = Matrix::zeros(2, 256);
        let spec = QuantSpec::for_format(QuantFormat::Q4K).unwrap();
        let qt = quantize_tensor(&w, &spec).unwrap();
        for sb in &qt.super_blocks {
            assert_eq!(sb.super_scale, 0.0);
            assert!(sb.sub_scale_codes.iter().all(|&c| c == 0));
            assert!(sb.packed_codes.iter().all(|&b| b == 0));
        }
        let back = dequantize_tensor(&qt);
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q8_full_scale_row() {
        let w = Matrix::new(1, 256, vec![1.0; 256]).unwrap();
        let spec = QuantSpec::for_format(QuantFormat::Q8).unwrap();
        let qt = quantize_tensor(&w, &spec).unwrap();
        let mut codes = vec![0i32; 32];
        for sb in &qt.super_blocks {
            sb.unpack_sub_block(&spec, 0, &mut codes);
            assert!(codes.iter().all(|&c| c == 127));
            let step = sb.step(&spec, 0);
            assert!((step - 1.0 / 127.0).abs() < 1e-5);
        }
        let back = dequantize_tensor(&qt);
        let step = 1.0 / 127.0;
        assert!(back.data().iter().all(|&v| (v - 1.0).abs() <= step));
    }

    #[test]
    fn dequantize_is_code_times_step() {
        let spec = QuantSpec::for_format(QuantFormat::Q8).unwrap();
        // f16-exact step so the product is exact
        let step = 0.0078125f32; // 2^-7
        let mut codes = vec![0i32; 32];
        codes[0] = 127;
        codes[1] = -127;
        let qt = QuantizedTensor {
            spec,
            rows: 1,
            cols: 32,
            super_blocks: vec![SuperBlock {
                super_scale: step,
                sub_scale_codes: vec![],
                packed_codes: bitpack::pack_signed(&codes, 8),
            }],
        };
        let back = dequantize_tensor(&qt);
        assert_eq!(back.get(0, 0), 127.0 * step);
        assert_eq!(back.get(0, 1), -127.0 * step);
        assert_eq!(back.get(0, 2), 0.0);
    }

    #[test]
    fn non_multiple_width_rejected() {
        let w = Matrix::zeros(2, 250);
        let spec = QuantSpec::for_format(QuantFormat::Q4K).unwrap();
        assert!(matches!(
            quantize_tensor(&w, &spec),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut w = Matrix::zeros(1, 256);
        w.data_mut()[17] = f32::INFINITY;
        let spec = QuantSpec::for_format(QuantFormat::Q2K).unwrap();
        assert!(matches!(
            quantize_tensor(&w, &spec),
            Err(Error::InvalidData(_))
        ));
    }
}
