//! Decoder-only transformer forward pass with KV caching.
//!
//! Each block applies pre-norm attention and a pre-norm GELU FFN with
//! residual connections. The six per-block linear projections may be
//! stored full precision, block-quantized or ternary; activations are
//! re-quantized at the input of every quantized linear layer. Attention
//! scores, softmax, the value-weighted sum, norms and the embedding /
//! tied output head always run in full precision.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kernels::{qmatvec, ref_matvec, ternary_matvec};
use crate::matrix::Matrix;
use crate::quant::activation::quantize_activation;
use crate::quant::ternary::TernaryTensor;
use crate::quant::{QuantFormat, QuantizedTensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Decoder dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Attention heads h (must divide d).
    pub n_heads: usize,
    /// Feed-forward size.
    pub ff_dim: usize,
    /// Maximum sequence length (KV-cache capacity).
    pub max_seq_len: usize,
    /// Decoder block count (0 = embedding + norm + head only).
    pub n_blocks: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.n_heads == 0
            || self.ff_dim == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// A linear projection in one of the supported storage formats.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearWeight {
    F32(Matrix),
    Quantized(QuantizedTensor),
    Ternary(TernaryTensor),
}

impl LinearWeight {
    /// Store a full-precision matrix in the given format.
    pub fn from_matrix(m: Matrix, format: QuantFormat) -> Result<Self> {
        use crate::quant::ternary::{quantize_ternary, TernaryMode};
        use crate::quant::{quantize_tensor, QuantSpec};
        Ok(match format {
            QuantFormat::F32Ref => LinearWeight::F32(m),
            QuantFormat::T158 => {
                LinearWeight::Ternary(quantize_ternary(&m, TernaryMode::AbsMean)?)
            }
            fmt => {
                let spec = QuantSpec::for_format(fmt)?;
                LinearWeight::Quantized(quantize_tensor(&m, &spec)?)
            }
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            LinearWeight::F32(m) => m.rows(),
            LinearWeight::Quantized(q) => q.rows(),
            LinearWeight::Ternary(t) => t.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LinearWeight::F32(m) => m.cols(),
            LinearWeight::Quantized(q) => q.cols(),
            LinearWeight::Ternary(t) => t.cols(),
        }
    }

    pub fn format(&self) -> QuantFormat {
        match self {
            LinearWeight::F32(_) => QuantFormat::F32Ref,
            LinearWeight::Quantized(q) => q.spec.format,
            LinearWeight::Ternary(_) => QuantFormat::T158,
        }
    }

    /// Apply the projection; quantized paths re-quantize `x` first.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        match self {
            LinearWeight::F32(m) => ref_matvec(m, x),
            LinearWeight::Quantized(q) => {
                let qx = quantize_activation(x)?;
                qmatvec(q, &qx)
            }
            LinearWeight::Ternary(t) => {
                let qx = quantize_activation(x)?;
                ternary_matvec(t, &qx)
            }
        }
    }
}

/// Gain and bias of one layer norm (always full precision).
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: NormParams,
    pub w_query: LinearWeight,
    pub w_key: LinearWeight,
    pub w_value: LinearWeight,
    /// Output projection applied to the concatenated heads (d x d).
    pub w_attn_out: LinearWeight,
    pub ffn_norm: NormParams,
    /// d_ff x d.
    pub w_ff_in: LinearWeight,
    pub b_ff_in: Vec<f32>,
    /// d x d_ff.
    pub w_ff_out: LinearWeight,
    pub b_ff_out: Vec<f32>,
}

/// Full decoder weights. The output head is tied to the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: ModelConfig,
    /// V x d token embedding, also used as the output head.
    pub embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: NormParams,
}

impl DecoderWeights {
    /// Dimensional agreement with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.embed_dim;
        let ff = self.config.ff_dim;
        let check = |name: &str, w: &LinearWeight, rows: usize, cols: usize| -> Result<()> {
            if w.rows() != rows || w.cols() != cols {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {rows}x{cols}"),
                    got: format!("{}x{}", w.rows(), w.cols()),
                });
            }
            Ok(())
        };
        if self.embedding.rows() != self.config.vocab_size || self.embedding.cols() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding {}x{}", self.config.vocab_size, d),
                got: format!("{}x{}", self.embedding.rows(), self.embedding.cols()),
            });
        }
        if self.blocks.len() != self.config.n_blocks {
            return Err(Error::ShapeMismatch {
                expected: format!("{} blocks", self.config.n_blocks),
                got: format!("{}", self.blocks.len()),
            });
        }
        for (i, b) in self.blocks.iter().enumerate() {
            check(&format!("block{i}.w_query"), &b.w_query, d, d)?;
            check(&format!("block{i}.w_key"), &b.w_key, d, d)?;
            check(&format!("block{i}.w_value"), &b.w_value, d, d)?;
            check(&format!("block{i}.w_attn_out"), &b.w_attn_out, d, d)?;
            check(&format!("block{i}.w_ff_in"), &b.w_ff_in, ff, d)?;
            check(&format!("block{i}.w_ff_out"), &b.w_ff_out, d, ff)?;
            if b.b_ff_in.len() != ff || b.b_ff_out.len() != d {
                return Err(Error::ShapeMismatch {
                    expected: format!("block{i} biases {ff}/{d}"),
                    got: format!("{}/{}", b.b_ff_in.len(), b.b_ff_out.len()),
                });
            }
        }
        Ok(())
    }
}

/// Per-generation-session key/value cache.
///
/// Stores one d-vector per position per block for keys and values; head
/// `i` owns the contiguous slice `[i*head_dim, (i+1)*head_dim)`. All
/// blocks advance together, once per decoded token.
#[derive(Debug, Clone)]
pub struct KVCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    embed_dim: usize,
    len: usize,
    capacity: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_blocks],
            values: vec![Vec::new(); config.n_blocks],
            embed_dim: config.embed_dim,
            len: 0,
            capacity: config.max_seq_len,
        }
    }

    /// Positions decoded so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.capacity
    }

    fn append(&mut self, block: usize, k: &[f32], v: &[f32]) {
        self.keys[block].extend_from_slice(k);
        self.values[block].extend_from_slice(v);
    }

    /// Key vector of `position` in `block`.
    fn key(&self, block: usize, position: usize) -> &[f32] {
        let d = self.embed_dim;
        &self.keys[block][position * d..(position + 1) * d]
    }

    fn value(&self, block: usize, position: usize) -> &[f32] {
        let d = self.embed_dim;
        &self.values[block][position * d..(position + 1) * d]
    }

    /// Commit one decoded position across all blocks. [`decode_step`]
    /// calls this once per token; drive it manually only when calling
    /// [`attention_forward`] directly.
    pub fn advance(&mut self) {
        self.len += 1;
        debug_assert!(self
            .keys
            .iter()
            .all(|k| k.len() == self.len * self.embed_dim));
    }
}

/// Numerically stabilized softmax in place.
pub fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s));
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm(x: &[f32], norm: &NormParams) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(norm.gain.iter().zip(&norm.bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// GELU via the tanh approximation
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Multi-head self-attention for one new position.
///
/// Projects `hidden` to Q/K/V, appends K/V to the cache, attends over
/// all cached positions plus the new one with `softmax(q k / sqrt(d))`,
/// and applies the output projection to the concatenated heads.
pub fn attention_forward(
    block: &BlockWeights,
    block_idx: usize,
    hidden: &[f32],
    cache: &mut KVCache,
    config: &ModelConfig,
) -> Result<Vec<f32>> {
    if cache.is_full() {
        return Err(Error::CacheFull {
            capacity: cache.capacity(),
        });
    }
    let q = block.w_query.forward(hidden)?;
    let k = block.w_key.forward(hidden)?;
    let v = block.w_value.forward(hidden)?;
    cache.append(block_idx, &k, &v);

    let positions = cache.len() + 1; // cached plus the vector just appended
    let head_dim = config.head_dim();
    let scale = 1.0 / (config.embed_dim as f32).sqrt();

    let mut concat = vec![0.0f32; config.embed_dim];
    let mut scores = vec![0.0f32; positions];
    for h in 0..config.n_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let q_h = &q[lo..hi];
        for (pos, score) in scores.iter_mut().enumerate() {
            let k_pos = if pos + 1 == positions {
                &k[lo..hi]
            } else {
                &cache.key(block_idx, pos)[lo..hi]
            };
            let dot: f32 = q_h.iter().zip(k_pos).map(|(a, b)| a * b).sum();
            *score = dot * scale;
        }
        softmax_in_place(&mut scores);
        let out_h = &mut concat[lo..hi];
        for (pos, &weight) in scores.iter().enumerate() {
            let v_pos = if pos + 1 == positions {
                &v[lo..hi]
            } else {
                &cache.value(block_idx, pos)[lo..hi]
            };
            for (o, &vv) in out_h.iter_mut().zip(v_pos) {
                *o += weight * vv;
            }
        }
    }
    block.w_attn_out.forward(&concat)
}

/// Feed-forward: `GELU(x W_in + b_in) W_out + b_out`.
pub fn ffn_forward(block: &BlockWeights, x: &[f32]) -> Result<Vec<f32>> {
    let mut inner = block.w_ff_in.forward(x)?;
    for (v, &b) in inner.iter_mut().zip(&block.b_ff_in) {
        *v = gelu(*v + b);
    }
    let mut out = block.w_ff_out.forward(&inner)?;
    for (v, &b) in out.iter_mut().zip(&block.b_ff_out) {
        *v += b;
    }
    Ok(out)
}

/// Decode one token: embedding, N pre-norm blocks with residuals, final
/// norm, tied output head. Advances the cache by one position.
pub fn decode_step(
    weights: &DecoderWeights,
    cache: &mut KVCache,
    token: u32,
) -> Result<Vec<f32>> {
    let config = &weights.config;
    if token as usize >= config.vocab_size {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: config.vocab_size,
        });
    }
    if cache.is_full() {
        return Err(Error::CacheFull {
            capacity: cache.capacity(),
        });
    }

    let mut hidden = weights.embedding.row(token as usize).to_vec();
    for (i, block) in weights.blocks.iter().enumerate() {
        let normed = layer_norm(&hidden, &block.attn_norm);
        let attn = attention_forward(block, i, &normed, cache, config)?;
        for (h, a) in hidden.iter_mut().zip(&attn) {
            *h += a;
        }
        let normed = layer_norm(&hidden, &block.ffn_norm);
        let ffn = ffn_forward(block, &normed)?;
        for (h, f) in hidden.iter_mut().zip(&ffn) {
            *h += f;
        }
    }
    cache.advance();

    let final_hidden = layer_norm(&hidden, &weights.final_norm);
    ref_matvec(&weights.embedding, &final_hidden)
}

/// Greedy argmax with ties broken toward the lowest token id.
pub fn argmax_token(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy generation: feeds the prompt, then decodes `n_new` tokens,
/// returning them with the wall-clock latency of each decode step in
/// milliseconds.
pub fn generate(
    weights: &DecoderWeights,
    prompt: &[u32],
    n_new: usize,
) -> Result<(Vec<u32>, Vec<f64>)> {
    let config = &weights.config;
    if prompt.len() + n_new > config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "prompt {} + n_new {} exceeds max sequence length {}",
            prompt.len(),
            n_new,
            config.max_seq_len
        )));
    }
    if n_new == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt must be non-empty to generate".into(),
        ));
    }

    let mut cache = KVCache::new(config);
    // Warm the cache on all but the last prompt token.
    for &tok in &prompt[..prompt.len() - 1] {
        decode_step(weights, &mut cache, tok)?;
    }

    let mut tokens = Vec::with_capacity(n_new);
    let mut latencies_ms = Vec::with_capacity(n_new);
    let mut last = prompt[prompt.len() - 1];
    for _ in 0..n_new {
        let start = Instant::now();
        let logits = decode_step(weights, &mut cache, last)?;
        let next = argmax_token(&logits);
        latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        tokens.push(next);
        last = next;
    }
    Ok((tokens, latencies_ms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_weight(m: Matrix) -> LinearWeight {
        LinearWeight::F32(m)
    }

    fn identity_block(d: usize, ff: usize) -> BlockWeights {
        BlockWeights {
            attn_norm: NormParams {
                gain: vec![1.0; d],
                bias: vec![0.0; d],
            },
            w_query: f32_weight(Matrix::identity(d)),
            w_key: f32_weight(Matrix::identity(d)),
            w_value: f32_weight(Matrix::identity(d)),
            w_attn_out: f32_weight(Matrix::identity(d)),
            ffn_norm: NormParams {
                gain: vec![1.0; d],
                bias: vec![0.0; d],
            },
            w_ff_in: f32_weight(Matrix::zeros(ff, d)),
            b_ff_in: vec![0.0; ff],
            w_ff_out: f32_weight(Matrix::zeros(d, ff)),
            b_ff_out: vec![0.0; d],
        }
    }

    #[test]
    fn softmax_uniform_scores() {
        let mut s = vec![0.0, 0.0, 0.0];
        softmax_in_place(&mut s);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_constant_vector() {
        let norm = NormParams {
            gain: vec![1.0; 4],
            bias: vec![0.5; 4],
        };
        let out = layer_norm(&[2.0; 4], &norm);
        for v in out {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_points() {
        let norm = NormParams {
            gain: vec![1.0; 2],
            bias: vec![0.0; 2],
        };
        let out = layer_norm(&[1.0, -1.0], &norm);
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!((out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn ffn_zero_weights_pass_bias() {
        let d = 4;
        let mut block = identity_block(d, 8);
        block.b_ff_out = vec![0.25; d];
        let out = ffn_forward(&block, &[1.0; 4]).unwrap();
        assert_eq!(out, vec![0.25; 4]);
    }

    #[test]
    fn single_position_attention_is_value_projection() {
        let d = 4;
        let config = ModelConfig {
            embed_dim: d,
            n_heads: 1,
            ff_dim: 8,
            max_seq_len: 4,
            n_blocks: 1,
            vocab_size: 8,
        };
        let mut block = identity_block(d, 8);
        // distinguish W_X from identity
        block.w_attn_out = f32_weight(Matrix::from_fn(d, d, |r, c| {
            if r == c {
                2.0
            } else {
                0.0
            }
        }));
        let mut cache = KVCache::new(&config);
        let hidden = vec![1.0, 0.0, 0.0, 0.0];
        let out = attention_forward(&block, 0, &hidden, &mut cache, &config).unwrap();
        // softmax over one position = 1, so output = W_X * V = 2 * hidden
        assert_eq!(out, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_block_config_is_head_of_norm_of_embedding() {
        let d = 4;
        let config = ModelConfig {
            embed_dim: d,
            n_heads: 1,
            ff_dim: 8,
            max_seq_len: 4,
            n_blocks: 0,
            vocab_size: 3,
        };
        let embedding = Matrix::from_fn(3, d, |r, c| (r * d + c) as f32 * 0.1);
        let weights = DecoderWeights {
            config,
            embedding: embedding.clone(),
            blocks: vec![],
            final_norm: NormParams {
                gain: vec![1.0; d],
                bias: vec![0.0; d],
            },
        };
        let mut cache = KVCache::new(&config);
        let logits = decode_step(&weights, &mut cache, 1).unwrap();
        let expected = ref_matvec(
            &embedding,
            &layer_norm(embedding.row(1), &weights.final_norm),
        )
        .unwrap();
        assert_eq!(logits, expected);
    }

    #[test]
    fn token_and_capacity_errors() {
        let config = ModelConfig {
            embed_dim: 4,
            n_heads: 1,
            ff_dim: 8,
            max_seq_len: 2,
            n_blocks: 1,
            vocab_size: 4,
        };
        let weights = DecoderWeights {
            config,
            embedding: Matrix::zeros(4, 4),
            blocks: vec![identity_block(4, 8)],
            final_norm: NormParams {
                gain: vec![1.0; 4],
                bias: vec![0.0; 4],
            },
        };
        let mut cache = KVCache::new(&config);
        assert!(matches!(
            decode_step(&weights, &mut cache, 9),
            Err(Error::TokenOutOfRange { .. })
        ));
        decode_step(&weights, &mut cache, 0).unwrap();
        decode_step(&weights, &mut cache, 0).unwrap();
        assert!(matches!(
            decode_step(&weights, &mut cache, 0),
            Err(Error::CacheFull { .. })
        ));
    }

    #[test]
    fn generate_empty_and_ties() {
        let config = ModelConfig {
            embed_dim: 4,
            n_heads: 1,
            ff_dim: 8,
            max_seq_len: 8,
            n_blocks: 0,
            vocab_size: 4,
        };
        let weights = DecoderWeights {
            config,
            embedding: Matrix::zeros(4, 4),
            blocks: vec![],
            final_norm: NormParams {
                gain: vec![1.0; 4],
                bias: vec![0.0; 4],
            },
        };
        let (tokens, lat) = generate(&weights, &[0], 0).unwrap();
        assert!(tokens.is_empty() && lat.is_empty());
        // all-zero logits: ties resolve to token 0
        let (tokens, _) = generate(&weights, &[1], 3).unwrap();
        assert_eq!(tokens, vec![0, 0, 0]);
    }
}
