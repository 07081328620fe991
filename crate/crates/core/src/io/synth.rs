//! Seeded synthetic model generator.
//!
//! Full-precision weights are drawn from a ChaCha8 stream seeded with
//! `seed_from_u64`, turned into N(0, 0.02) samples via Box-Muller:
//! each draw consumes two u64s `a`, `b`, maps them to
//! `u = ((x >> 11) + 1) * 2^-53` in (0, 1], and yields
//! `sigma * sqrt(-2 ln u_a) * cos(2 pi u_b)` (the sine partner is used
//! as the next sample). Draw order: embedding row-major, then per block
//! attn norm gain (offset +1) and bias, W_Q, W_K, W_V, the attention
//! output projection, ffn norm gain (+1) and bias, W_in, b_in, W_out,
//! b_out, then the final norm gain (+1) and bias. Norm gains are
//! centered at 1 so a fresh model is usable; everything else is
//! centered at 0. The same seed always yields the same container bytes.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{BlockWeights, DecoderWeights, LinearWeight, ModelConfig, NormParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::{QuantFormat, QuantSpec};

/// Standard deviation of generated weights.
pub const WEIGHT_SIGMA: f64 = 0.02;

/// Gaussian sampler over a seeded ChaCha8 stream.
pub struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    fn uniform_open(&mut self) -> f64 {
        // (0, 1]: 53 mantissa bits, never zero
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Next N(0, sigma) sample.
    pub fn normal(&mut self, sigma: f64) -> f32 {
        if let Some(z) = self.spare.take() {
            return (z * sigma) as f32;
        }
        let u = self.uniform_open();
        let v = self.uniform_open();
        let r = (-2.0 * u.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * v;
        self.spare = Some(r * theta.sin());
        (r * theta.cos() * sigma) as f32
    }

    fn fill(&mut self, n: usize, offset: f32) -> Vec<f32> {
        (0..n)
            .map(|_| self.normal(WEIGHT_SIGMA) + offset)
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, self.fill(rows * cols, 0.0)).expect("shape")
    }
}

fn into_format(m: Matrix, format: QuantFormat) -> Result<LinearWeight> {
    LinearWeight::from_matrix(m, format)
}

/// Generate a deterministic synthetic model, quantizing the six linear
/// projections of each block to `format`.
pub fn gen_synthetic_model(
    config: &ModelConfig,
    seed: u64,
    format: QuantFormat,
) -> Result<DecoderWeights> {
    config.validate()?;
    if format.is_kquant() {
        let width = QuantSpec::for_format(format)?.super_block_width();
        if !config.embed_dim.is_multiple_of(width) || !config.ff_dim.is_multiple_of(width) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} and ff_dim {} must be multiples of {} for {}",
                config.embed_dim,
                config.ff_dim,
                width,
                format.name()
            )));
        }
    }

    let d = config.embed_dim;
    let ff = config.ff_dim;
    let mut src = GaussianSource::new(seed);

    let embedding = src.matrix(config.vocab_size, d);
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let attn_norm = NormParams {
            gain: src.fill(d, 1.0),
            bias: src.fill(d, 0.0),
        };
        let w_query = into_format(src.matrix(d, d), format)?;
        let w_key = into_format(src.matrix(d, d), format)?;
        let w_value = into_format(src.matrix(d, d), format)?;
        let w_attn_out = into_format(src.matrix(d, d), format)?;
        let ffn_norm = NormParams {
            gain: src.fill(d, 1.0),
            bias: src.fill(d, 0.0),
        };
        let w_ff_in = into_format(src.matrix(ff, d), format)?;
        let b_ff_in = src.fill(ff, 0.0);
        let w_ff_out = into_format(src.matrix(d, ff), format)?;
        let b_ff_out = src.fill(d, 0.0);
        blocks.push(BlockWeights {
            attn_norm,
            w_query,
            w_key,
            w_value,
            w_attn_out,
            ffn_norm,
            w_ff_in,
            b_ff_in,
            w_ff_out,
            b_ff_out,
        });
    }
    let final_norm = NormParams {
        gain: src.fill(d, 1.0),
        bias: src.fill(d, 0.0),
    };

    Ok(DecoderWeights {
        config: *config,
        embedding,
        blocks,
        final_norm,
    })
}
