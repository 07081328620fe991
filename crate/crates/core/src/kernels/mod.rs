//! Matrix-vector kernels over quantized weights and 8-bit activations.
//!
//! Accumulation order is part of the contract: within a row, sub-blocks
//! are reduced in index order with exact i32 integer dot products, and
//! the running f32 total is updated as
//! `acc += (isum as f32) * (step * inv_scale)` per sub-block, where
//! `inv_scale = 1.0 / activation_scale` is computed once per call.
//! Callers may parallelize across rows; per-row results are identical
//! under any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::activation::QuantizedActivation;
use crate::quant::ternary::{TernaryTensor, TRITS_PER_BYTE};
use crate::quant::QuantizedTensor;

/// Arithmetic probe for instrumented kernel builds. The production path
/// uses [`NoProbe`], which compiles to nothing.
pub trait ArithProbe {
    #[inline(always)]
    fn record_mul(&mut self) {}
    #[inline(always)]
    fn record_add_sub(&mut self) {}
}

/// Zero-cost probe for production calls.
#[derive(Clone, Copy)]
pub struct NoProbe;

impl ArithProbe for NoProbe {}

/// Counting probe for instrumented test builds.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpCounter {
    pub muls: u64,
    pub add_subs: u64,
}

impl ArithProbe for OpCounter {
    #[inline(always)]
    fn record_mul(&mut self) {
        self.muls += 1;
    }
    #[inline(always)]
    fn record_add_sub(&mut self) {
        self.add_subs += 1;
    }
}

/// Integer row accumulators awaiting one shared scale application.
///
/// Used by the ternary kernel: per-row sums stay within i32 for any
/// supported shape (|code| <= 127 per term; 2^31 / 127 > 16M columns),
/// and k-quant sub-block partials are at most 32 * 127 * 127 < 2^31.
#[derive(Debug, Clone)]
pub struct AccumulatorVector {
    pub values: Vec<i32>,
    /// Scale applied after accumulation (weight scale times 1/s_a).
    pub combined_scale: f32,
}

impl AccumulatorVector {
    /// Apply the combined scale: `value * combined_scale` per row.
    pub fn resolve(&self) -> Vec<f32> {
        self.values
            .iter()
            .map(|&v| v as f32 * self.combined_scale)
            .collect()
    }
}

/// Worker pool for row-parallel kernels, sized by `QEDGE_THREADS`
/// (unset or 0 = rayon default).
pub fn thread_pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("QEDGE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool")
    })
}

/// Full-precision reference: exact f32 dot products with fixed
/// left-to-right accumulation per row. Rows are independent, so the
/// row-parallel dispatch cannot change any result bit.
pub fn ref_matvec(w: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if w.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("vector of {}", w.cols()),
            got: format!("{}", x.len()),
        });
    }
    let out = thread_pool().install(|| {
        (0..w.rows())
            .into_par_iter()
            .map(|r| {
                let mut acc = 0.0f32;
                for (a, b) in w.row(r).iter().zip(x) {
                    acc += a * b;
                }
                acc
            })
            .collect()
    });
    Ok(out)
}

/// Integer dot of one sub-block directly over its packed bytes.
///
/// Integer addition is exact, so the summation order inside a sub-block
/// is free; only the f32 combination across sub-blocks is pinned.
#[inline]
fn sub_block_dot<P: ArithProbe>(bits: u32, packed: &[u8], xs: &[i8], probe: &mut P) -> i32 {
    let mut isum = 0i32;
    match bits {
        8 => {
            // sub-blocks are 4-aligned; split accumulators to unchain
            debug_assert_eq!(xs.len() % 4, 0);
            let (mut s0, mut s1, mut s2, mut s3) = (0i32, 0i32, 0i32, 0i32);
            let mut j = 0;
            while j + 4 <= xs.len() {
                s0 += (packed[j] as i8 as i32) * (xs[j] as i32);
                s1 += (packed[j + 1] as i8 as i32) * (xs[j + 1] as i32);
                s2 += (packed[j + 2] as i8 as i32) * (xs[j + 2] as i32);
                s3 += (packed[j + 3] as i8 as i32) * (xs[j + 3] as i32);
                for _ in 0..4 {
                    probe.record_mul();
                }
                j += 4;
            }
            isum = (s0 + s1) + (s2 + s3);
        }
        4 => {
            for (j, &b) in packed[..xs.len() / 2].iter().enumerate() {
                let b = b as i32;
                isum += ((b << 28) >> 28) * (xs[2 * j] as i32)
                    + ((b << 24) >> 28) * (xs[2 * j + 1] as i32);
                probe.record_mul();
                probe.record_mul();
            }
        }
        2 => {
            for (j, &b) in packed[..xs.len() / 4].iter().enumerate() {
                let b = b as i32;
                isum += ((b << 30) >> 30) * (xs[4 * j] as i32)
                    + ((b << 28) >> 30) * (xs[4 * j + 1] as i32)
                    + ((b << 26) >> 30) * (xs[4 * j + 2] as i32)
                    + ((b << 24) >> 30) * (xs[4 * j + 3] as i32);
                for _ in 0..4 {
                    probe.record_mul();
                }
            }
        }
        6 => {
            // 4 codes per 3 bytes, LSB-first
            for j in 0..xs.len() / 4 {
                let b0 = packed[3 * j] as i32;
                let b1 = packed[3 * j + 1] as i32;
                let b2 = packed[3 * j + 2] as i32;
                isum += ((b0 << 26) >> 26) * (xs[4 * j] as i32)
                    + ((((b0 >> 6) | (b1 << 2)) << 26) >> 26) * (xs[4 * j + 1] as i32)
                    + ((((b1 >> 4) | (b2 << 4)) << 26) >> 26) * (xs[4 * j + 2] as i32)
                    + ((b2 << 24) >> 26) * (xs[4 * j + 3] as i32);
                for _ in 0..4 {
                    probe.record_mul();
                }
            }
        }
        _ => unreachable!("unsupported weight width {bits}"),
    }
    isum
}

#[inline]
fn qmatvec_row<P: ArithProbe>(
    qw: &QuantizedTensor,
    row: usize,
    codes: &[i8],
    inv_scale: f32,
    probe: &mut P,
) -> f32 {
    let spec = &qw.spec;
    let sub = spec.sub_block_size;
    let width = spec.super_block_width();
    let bits = spec.bits_per_weight;
    let sub_bytes = sub * bits as usize / 8;
    let mut acc = 0.0f32;
    for (b, block) in qw.row_blocks(row).iter().enumerate() {
        let col0 = b * width;
        for k in 0..spec.sub_blocks_per_super {
            let xs = &codes[col0 + k * sub..col0 + (k + 1) * sub];
            let packed = &block.packed_codes[k * sub_bytes..(k + 1) * sub_bytes];
            let isum = sub_block_dot(bits, packed, xs, probe);
            let step = block.step(spec, k);
            acc += isum as f32 * (step * inv_scale);
        }
    }
    acc
}

/// Quantized matvec: integer sub-block dot products scaled by
/// `step / activation_scale`, reduced across blocks in f32.
pub fn qmatvec(qw: &QuantizedTensor, qx: &QuantizedActivation) -> Result<Vec<f32>> {
    check_qmatvec_shapes(qw, qx)?;
    let inv_scale = 1.0 / qx.scale;
    let out = thread_pool().install(|| {
        (0..qw.rows())
            .into_par_iter()
            .map(|r| qmatvec_row(qw, r, &qx.codes, inv_scale, &mut NoProbe))
            .collect()
    });
    Ok(out)
}

/// Sequential instrumented variant of [`qmatvec`]; same inner loop.
pub fn qmatvec_counting(
    qw: &QuantizedTensor,
    qx: &QuantizedActivation,
) -> Result<(Vec<f32>, OpCounter)> {
    check_qmatvec_shapes(qw, qx)?;
    let inv_scale = 1.0 / qx.scale;
    let mut counter = OpCounter::default();
    let out = (0..qw.rows())
        .map(|r| qmatvec_row(qw, r, &qx.codes, inv_scale, &mut counter))
        .collect();
    Ok((out, counter))
}

fn check_qmatvec_shapes(qw: &QuantizedTensor, qx: &QuantizedActivation) -> Result<()> {
    if qw.cols() != qx.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("activation of {}", qw.cols()),
            got: format!("{}", qx.len()),
        });
    }
    Ok(())
}

/// Per-sub-block integer dot products for one activation vector,
/// before any scaling. Row-major: `sums[row][block]`.
///
/// The integer stage is linear in the activation codes, which tests
/// assert directly on this function.
pub fn sub_block_code_sums(qw: &QuantizedTensor, codes: &[i8]) -> Result<Vec<Vec<i32>>> {
    if qw.cols() != codes.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("activation of {}", qw.cols()),
            got: format!("{}", codes.len()),
        });
    }
    let spec = &qw.spec;
    let sub = spec.sub_block_size;
    let width = spec.super_block_width();
    let mut unpacked = vec![0i32; sub];
    let mut all = Vec::with_capacity(qw.rows());
    for r in 0..qw.rows() {
        let mut row_sums = Vec::with_capacity(qw.blocks_per_row() * spec.sub_blocks_per_super);
        for (b, block) in qw.row_blocks(r).iter().enumerate() {
            let col0 = b * width;
            for k in 0..spec.sub_blocks_per_super {
                block.unpack_sub_block(spec, k, &mut unpacked);
                let xs = &codes[col0 + k * sub..col0 + (k + 1) * sub];
                let isum: i32 = unpacked.iter().zip(xs).map(|(&w, &x)| w * x as i32).sum();
                row_sums.push(isum);
            }
        }
        all.push(row_sums);
    }
    Ok(all)
}

/// Decoded trits for each base-3 packed byte value.
const fn build_trit_lut() -> [[i8; TRITS_PER_BYTE]; 243] {
    let mut lut = [[0i8; TRITS_PER_BYTE]; 243];
    let mut b = 0;
    while b < 243 {
        let mut v = b;
        let mut i = 0;
        while i < TRITS_PER_BYTE {
            lut[b][i] = (v % 3) as i8 - 1;
            v /= 3;
            i += 1;
        }
        b += 1;
    }
    lut
}

static TRIT_LUT: [[i8; TRITS_PER_BYTE]; 243] = build_trit_lut();

/// Add or subtract `x` according to the trit via comparison masks:
/// additions, subtractions and bit-ANDs only, no multiplications and no
/// data-dependent branches.
#[inline(always)]
fn trit_accumulate<P: ArithProbe>(acc: i32, t: i8, x: i8, probe: &mut P) -> i32 {
    let xv = x as i32;
    let plus = xv & -((t == 1) as i32);
    let minus = xv & -((t == -1) as i32);
    probe.record_add_sub();
    probe.record_add_sub();
    (acc + plus) - minus
}

#[inline]
fn ternary_row_sum<P: ArithProbe>(row_packed: &[u8], codes: &[i8], probe: &mut P) -> i32 {
    let mut acc = 0i32;
    let n = codes.len();
    let full_bytes = n / TRITS_PER_BYTE;
    for (byte_idx, &byte) in row_packed[..full_bytes].iter().enumerate() {
        let trits = &TRIT_LUT[byte as usize];
        let xs = &codes[byte_idx * TRITS_PER_BYTE..(byte_idx + 1) * TRITS_PER_BYTE];
        for (&t, &x) in trits.iter().zip(xs) {
            acc = trit_accumulate(acc, t, x, probe);
        }
    }
    if full_bytes < row_packed.len() {
        let trits = &TRIT_LUT[row_packed[full_bytes] as usize];
        for (i, &t) in trits[..n - full_bytes * TRITS_PER_BYTE].iter().enumerate() {
            acc = trit_accumulate(acc, t, codes[full_bytes * TRITS_PER_BYTE + i], probe);
        }
    }
    acc
}

/// Ternary matvec: multiply-free accumulation of activation codes,
/// scaled once per row by `gamma / activation_scale`.
pub fn ternary_matvec(tw: &TernaryTensor, qx: &QuantizedActivation) -> Result<Vec<f32>> {
    check_ternary_shapes(tw, qx)?;
    let combined = tw.gamma * (1.0 / qx.scale);
    let acc = thread_pool().install(|| {
        (0..tw.rows())
            .into_par_iter()
            .map(|r| ternary_row_sum(tw.row_packed(r), &qx.codes, &mut NoProbe))
            .collect()
    });
    let acc = AccumulatorVector {
        values: acc,
        combined_scale: combined,
    };
    Ok(acc.resolve())
}

/// Sequential instrumented variant of [`ternary_matvec`]; same inner loop.
pub fn ternary_matvec_counting(
    tw: &TernaryTensor,
    qx: &QuantizedActivation,
) -> Result<(Vec<f32>, OpCounter)> {
    check_ternary_shapes(tw, qx)?;
    let combined = tw.gamma * (1.0 / qx.scale);
    let mut counter = OpCounter::default();
    let values = (0..tw.rows())
        .map(|r| ternary_row_sum(tw.row_packed(r), &qx.codes, &mut counter))
        .collect();
    let acc = AccumulatorVector {
        values,
        combined_scale: combined,
    };
    Ok((acc.resolve(), counter))
}

fn check_ternary_shapes(tw: &TernaryTensor, qx: &QuantizedActivation) -> Result<()> {
    if tw.cols() != qx.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("activation of {}", tw.cols()),
            got: format!("{}", qx.len()),
        });
    }
    Ok(())
}
