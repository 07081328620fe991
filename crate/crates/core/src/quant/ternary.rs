//! Ternary {-1, 0, +1} weight tensors with one per-tensor scale.
//!
//! Trits are packed five per byte in base 3 (3^5 = 243 fits a byte),
//! 1.6 bits per trit. Rows are packed independently so kernels can walk
//! a row without crossing byte boundaries into the next one.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::round_away;

/// Trits per packed byte.
pub const TRITS_PER_BYTE: usize = 5;

/// How the per-tensor scale is derived from the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TernaryMode {
    /// gamma = mean|w| (default; keeps small weights alive as 0-trits).
    #[default]
    AbsMean,
    /// gamma = max|w|.
    AbsMax,
}

/// Packed ternary weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryTensor {
    rows: usize,
    cols: usize,
    /// Base-3 packed trits, `rows * row_bytes(cols)` bytes.
    trits: Vec<u8>,
    /// Per-tensor positive scale (1.0 for an all-zero tensor).
    pub gamma: f32,
}

/// Packed bytes per row of `cols` trits.
pub fn row_bytes(cols: usize) -> usize {
    cols.div_ceil(TRITS_PER_BYTE)
}

fn pack_row(trits: &[i8], out: &mut Vec<u8>) {
    for group in trits.chunks(TRITS_PER_BYTE) {
        let mut byte = 0u8;
        // digit i weighted 3^i, trit stored as t + 1 in {0,1,2}
        for (i, &t) in group.iter().enumerate() {
            byte += (t + 1) as u8 * 3u8.pow(i as u32);
        }
        out.push(byte);
    }
}

impl TernaryTensor {
    /// Build from unpacked trits (row-major, values in {-1, 0, +1}).
    pub fn from_trits(rows: usize, cols: usize, trits: &[i8], gamma: f32) -> Result<Self> {
        if trits.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} trits", rows * cols),
                got: format!("{}", trits.len()),
            });
        }
        if trits.iter().any(|&t| !(-1..=1).contains(&t)) {
            return Err(Error::InvalidData("trit outside {-1,0,+1}".into()));
        }
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        let mut packed = Vec::with_capacity(rows * row_bytes(cols));
        for row in trits.chunks(cols) {
            pack_row(row, &mut packed);
        }
        Ok(Self {
            rows,
            cols,
            trits: packed,
            gamma,
        })
    }

    /// Rebuild from packed bytes (container loading path).
    pub fn from_packed(rows: usize, cols: usize, trits: Vec<u8>, gamma: f32) -> Result<Self> {
        if trits.len() != rows * row_bytes(cols) {
            return Err(Error::Truncated(format!(
                "ternary payload {} bytes, expected {}",
                trits.len(),
                rows * row_bytes(cols)
            )));
        }
        // Reject bytes outside base-3 range so corrupted payloads surface.
        if trits.iter().any(|&b| b as usize >= 3usize.pow(TRITS_PER_BYTE as u32)) {
            return Err(Error::InvalidData("ternary byte outside base-3 range".into()));
        }
        Ok(Self {
            rows,
            cols,
            trits,
            gamma,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn packed(&self) -> &[u8] {
        &self.trits
    }

    /// Packed bytes of row `r`.
    pub fn row_packed(&self, r: usize) -> &[u8] {
        let rb = row_bytes(self.cols);
        &self.trits[r * rb..(r + 1) * rb]
    }

    /// Unpack row `r` into `out` (length `cols`).
    pub fn unpack_row_into(&self, r: usize, out: &mut [i8]) {
        debug_assert_eq!(out.len(), self.cols);
        let mut col = 0;
        for &byte in self.row_packed(r) {
            let mut v = byte;
            for _ in 0..TRITS_PER_BYTE {
                if col == self.cols {
                    break;
                }
                out[col] = (v % 3) as i8 - 1;
                v /= 3;
                col += 1;
            }
        }
    }

    /// Dequantize to `gamma * trit`.
    pub fn dequantize(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        let mut row = vec![0i8; self.cols];
        for r in 0..self.rows {
            self.unpack_row_into(r, &mut row);
            data.extend(row.iter().map(|&t| t as f32 * self.gamma));
        }
        Matrix::new(self.rows, self.cols, data).expect("shape preserved")
    }
}

/// Quantize a matrix to ternary trits with scale gamma.
///
/// `trit = clamp(round(w / gamma), -1, +1)`; an all-zero input yields
/// gamma = 1 and all trits 0.
pub fn quantize_ternary(weights: &Matrix, mode: TernaryMode) -> Result<TernaryTensor> {
    if weights.data().is_empty() {
        return Err(Error::InvalidArgument("empty weight matrix".into()));
    }
    weights.check_finite()?;
    let gamma = match mode {
        TernaryMode::AbsMean => {
            weights.data().iter().map(|w| w.abs() as f64).sum::<f64>() as f32
                / weights.data().len() as f32
        }
        TernaryMode::AbsMax => weights.data().iter().fold(0.0f32, |m, &w| m.max(w.abs())),
    };
    let gamma = if gamma == 0.0 { 1.0 } else { gamma };
    let trits: Vec<i8> = weights
        .data()
        .iter()
        .map(|&w| round_away(w / gamma).clamp(-1, 1) as i8)
        .collect();
    TernaryTensor::from_trits(weights.rows(), weights.cols(), &trits, gamma)
}
