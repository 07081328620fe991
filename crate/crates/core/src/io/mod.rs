//! Bit-exact model container (`.qedg`) reader/writer.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! 0   magic "QEDG"
//! 4   version: u32 (currently 1)
//! 8   config: d, heads, d_ff, l_max, n_blocks, vocab (6 x u32)
//! 32  payload CRC32 (IEEE reflected, over [payload_start, EOF))
//! 36  tensor count: u32
//! 40  directory entries, back to back:
//!       name_len: u16, name bytes (UTF-8)
//!       format_id: u8, rows: u64, cols: u64
//!       offset: u64 (absolute), length: u64 (bytes)
//! pad to the next 32-byte boundary, then tensor payloads, each padded
//! so every offset is 32-byte aligned.
//! ```
//!
//! Tensor payload encodings:
//! - `f32`: row-major little-endian f32
//! - k-quants: packed super-blocks in row-major block order, each
//!   `f16 super scale | sub-scale codes | weight codes` (see the quant
//!   module for the bitstream layout)
//! - `t1_58`: gamma as f32, then per-row base-3 packed trits

pub mod synth;

use std::io::Write as _;
use std::path::Path;

use half::f16;

use crate::decoder::{BlockWeights, DecoderWeights, LinearWeight, ModelConfig, NormParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::ternary::{row_bytes, TernaryTensor};
use crate::quant::{bitpack, QuantFormat, QuantSpec, QuantizedTensor, SuperBlock};

pub const MAGIC: [u8; 4] = *b"QEDG";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: usize = 32;

/// IEEE CRC32 (reflected, polynomial 0xEDB88320), as used for the
/// payload checksum. Self-contained so the format needs no external
/// reference.
pub fn crc32(data: &[u8]) -> u32 {
    fn table() -> &'static [u32; 256] {
        use std::sync::OnceLock;
        static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
        TABLE.get_or_init(|| {
            let mut t = [0u32; 256];
            for (i, slot) in t.iter_mut().enumerate() {
                let mut c = i as u32;
                for _ in 0..8 {
                    c = if c & 1 != 0 {
                        0xEDB8_8320 ^ (c >> 1)
                    } else {
                        c >> 1
                    };
                }
                *slot = c;
            }
            t
        })
    }
    let t = table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = t[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

#[derive(Debug, Clone)]
struct DirEntry {
    name: String,
    format: QuantFormat,
    rows: u64,
    cols: u64,
    offset: u64,
    length: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Tensor names in canonical container order.
fn tensor_order(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for i in 0..config.n_blocks {
        for field in [
            "attn_norm.gain",
            "attn_norm.bias",
            "w_query",
            "w_key",
            "w_value",
            "w_attn_out",
            "ffn_norm.gain",
            "ffn_norm.bias",
            "w_ff_in",
            "b_ff_in",
            "w_ff_out",
            "b_ff_out",
        ] {
            names.push(format!("block{i}.{field}"));
        }
    }
    names.push("final_norm.gain".to_string());
    names.push("final_norm.bias".to_string());
    names
}

fn encode_f32_slice(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_f32_slice(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Truncated("f32 payload not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_quantized(qt: &QuantizedTensor) -> Vec<u8> {
    let spec = &qt.spec;
    let mut out = Vec::with_capacity(qt.packed_bytes());
    for sb in &qt.super_blocks {
        out.extend_from_slice(&f16::from_f32(sb.super_scale).to_bits().to_le_bytes());
        if spec.sub_scale_bits > 0 {
            let codes: Vec<u32> = sb.sub_scale_codes.iter().map(|&c| c as u32).collect();
            out.extend_from_slice(&bitpack::pack_unsigned(&codes, spec.sub_scale_bits));
        }
        out.extend_from_slice(&sb.packed_codes);
    }
    out
}

fn decode_quantized(
    bytes: &[u8],
    format: QuantFormat,
    rows: usize,
    cols: usize,
) -> Result<QuantizedTensor> {
    let spec = QuantSpec::for_format(format)?;
    let width = spec.super_block_width();
    if cols == 0 || !cols.is_multiple_of(width) {
        return Err(Error::Layout(format!(
            "stored cols {cols} not a multiple of super-block width {width}"
        )));
    }
    let n_blocks = rows * cols / width;
    let block_bytes = spec.packed_super_block_bytes();
    if bytes.len() != n_blocks * block_bytes {
        return Err(Error::Truncated(format!(
            "quantized payload {} bytes, expected {}",
            bytes.len(),
            n_blocks * block_bytes
        )));
    }
    let sub_bytes = if spec.sub_scale_bits == 0 {
        0
    } else {
        bitpack::packed_len(spec.sub_blocks_per_super, spec.sub_scale_bits)
    };
    let weight_bytes = block_bytes - 2 - sub_bytes;
    let mut super_blocks = Vec::with_capacity(n_blocks);
    for chunk in bytes.chunks_exact(block_bytes) {
        let bits = u16::from_le_bytes([chunk[0], chunk[1]]);
        let super_scale = f16::from_bits(bits).to_f32();
        let sub_scale_codes = if sub_bytes == 0 {
            Vec::new()
        } else {
            bitpack::unpack_unsigned(
                &chunk[2..2 + sub_bytes],
                spec.sub_scale_bits,
                spec.sub_blocks_per_super,
            )
            .into_iter()
            .map(|c| c as u8)
            .collect()
        };
        let packed_codes = chunk[2 + sub_bytes..2 + sub_bytes + weight_bytes].to_vec();
        super_blocks.push(SuperBlock {
            super_scale,
            sub_scale_codes,
            packed_codes,
        });
    }
    QuantizedTensor::from_parts(spec, rows, cols, super_blocks)
}

fn encode_ternary(t: &TernaryTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + t.packed().len());
    out.extend_from_slice(&t.gamma.to_le_bytes());
    out.extend_from_slice(t.packed());
    out
}

fn decode_ternary(bytes: &[u8], rows: usize, cols: usize) -> Result<TernaryTensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("ternary payload shorter than scale".into()));
    }
    let gamma = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let expected = rows * row_bytes(cols);
    if bytes.len() != 4 + expected {
        return Err(Error::Truncated(format!(
            "ternary payload {} bytes, expected {}",
            bytes.len(),
            4 + expected
        )));
    }
    TernaryTensor::from_packed(rows, cols, bytes[4..].to_vec(), gamma)
}

fn encode_linear(w: &LinearWeight) -> (QuantFormat, u64, u64, Vec<u8>) {
    match w {
        LinearWeight::F32(m) => (
            QuantFormat::F32Ref,
            m.rows() as u64,
            m.cols() as u64,
            encode_f32_slice(m.data()),
        ),
        LinearWeight::Quantized(q) => (
            q.spec.format,
            q.rows() as u64,
            q.cols() as u64,
            encode_quantized(q),
        ),
        LinearWeight::Ternary(t) => (
            QuantFormat::T158,
            t.rows() as u64,
            t.cols() as u64,
            encode_ternary(t),
        ),
    }
}

fn linear_ref<'a>(block: &'a BlockWeights, field: &str) -> &'a LinearWeight {
    match field {
        "w_query" => &block.w_query,
        "w_key" => &block.w_key,
        "w_value" => &block.w_value,
        "w_attn_out" => &block.w_attn_out,
        "w_ff_in" => &block.w_ff_in,
        "w_ff_out" => &block.w_ff_out,
        _ => unreachable!("not a linear field"),
    }
}

fn vector_ref<'a>(weights: &'a DecoderWeights, name: &str) -> Option<&'a [f32]> {
    if let Some(rest) = name.strip_prefix("block") {
        let (idx, field) = rest.split_once('.')?;
        let block = &weights.blocks[idx.parse::<usize>().ok()?];
        return match field {
            "attn_norm.gain" => Some(&block.attn_norm.gain),
            "attn_norm.bias" => Some(&block.attn_norm.bias),
            "ffn_norm.gain" => Some(&block.ffn_norm.gain),
            "ffn_norm.bias" => Some(&block.ffn_norm.bias),
            "b_ff_in" => Some(&block.b_ff_in),
            "b_ff_out" => Some(&block.b_ff_out),
            _ => None,
        };
    }
    match name {
        "final_norm.gain" => Some(&weights.final_norm.gain),
        "final_norm.bias" => Some(&weights.final_norm.bias),
        _ => None,
    }
}

/// Serialize a model to container bytes. Byte-identical for identical
/// weights.
pub fn model_to_bytes(weights: &DecoderWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let config = &weights.config;

    // Encode tensors in canonical order.
    let mut entries: Vec<(String, QuantFormat, u64, u64, Vec<u8>)> = Vec::new();
    for name in tensor_order(config) {
        if name == "embedding" {
            entries.push((
                name,
                QuantFormat::F32Ref,
                weights.embedding.rows() as u64,
                weights.embedding.cols() as u64,
                encode_f32_slice(weights.embedding.data()),
            ));
        } else if let Some(vec) = vector_ref(weights, &name) {
            entries.push((
                name,
                QuantFormat::F32Ref,
                1,
                vec.len() as u64,
                encode_f32_slice(vec),
            ));
        } else {
            let rest = name.strip_prefix("block").expect("block tensor");
            let (idx, field) = rest.split_once('.').expect("block field");
            let block = &weights.blocks[idx.parse::<usize>().expect("block index")];
            let (fmt, rows, cols, bytes) = encode_linear(linear_ref(block, field));
            entries.push((name, fmt, rows, cols, bytes));
        }
    }

    // Directory size determines the payload start.
    let dir_len: usize = entries
        .iter()
        .map(|(name, ..)| 2 + name.len() + 1 + 8 * 4)
        .sum();
    let payload_start = align_up(40 + dir_len);

    // Assign aligned offsets.
    let mut offset = payload_start;
    let mut dir = Vec::with_capacity(entries.len());
    for (name, fmt, rows, cols, bytes) in &entries {
        dir.push(DirEntry {
            name: name.clone(),
            format: *fmt,
            rows: *rows,
            cols: *cols,
            offset: offset as u64,
            length: bytes.len() as u64,
        });
        offset = align_up(offset + bytes.len());
    }
    let total_len = offset;

    // Payload region, then checksum, then the full file.
    let mut payload = vec![0u8; total_len - payload_start];
    for (entry, (_, _, _, _, bytes)) in dir.iter().zip(&entries) {
        let at = entry.offset as usize - payload_start;
        payload[at..at + bytes.len()].copy_from_slice(bytes);
    }
    let checksum = crc32(&payload);

    let mut out = Vec::with_capacity(total_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.embed_dim,
        config.n_heads,
        config.ff_dim,
        config.max_seq_len,
        config.n_blocks,
        config.vocab_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&checksum.to_le_bytes());
    out.extend_from_slice(&(dir.len() as u32).to_le_bytes());
    for entry in &dir {
        out.extend_from_slice(&(entry.name.len() as u16).to_le_bytes());
        out.extend_from_slice(entry.name.as_bytes());
        out.push(entry.format.id());
        out.extend_from_slice(&entry.rows.to_le_bytes());
        out.extend_from_slice(&entry.cols.to_le_bytes());
        out.extend_from_slice(&entry.offset.to_le_bytes());
        out.extend_from_slice(&entry.length.to_le_bytes());
    }
    out.resize(payload_start, 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Write a model container to `path`.
pub fn save_model(weights: &DecoderWeights, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(weights)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "need {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parse a model container from bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<DecoderWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let config = ModelConfig {
        embed_dim: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        ff_dim: r.u32()? as usize,
        max_seq_len: r.u32()? as usize,
        n_blocks: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
    };
    let stored_crc = r.u32()?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Truncated("tensor name not UTF-8".into()))?;
        let format = QuantFormat::from_id(r.take(1)?[0])?;
        let rows = r.u64()?;
        let cols = r.u64()?;
        let offset = r.u64()?;
        let length = r.u64()?;
        dir.push(DirEntry {
            name,
            format,
            rows,
            cols,
            offset,
            length,
        });
    }

    let payload_start = align_up(r.pos);
    if payload_start > bytes.len() {
        return Err(Error::Truncated("file ends inside directory padding".into()));
    }
    let computed = crc32(&bytes[payload_start..]);
    if computed != stored_crc {
        return Err(Error::ChecksumMismatch {
            stored: stored_crc,
            computed,
        });
    }

    // Offset sanity: aligned, in-bounds, non-overlapping.
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(dir.len());
    for entry in &dir {
        if entry.offset % ALIGNMENT as u64 != 0 {
            return Err(Error::Truncated(format!(
                "tensor '{}' offset {} not {}-byte aligned",
                entry.name, entry.offset, ALIGNMENT
            )));
        }
        let end = entry.offset + entry.length;
        if (entry.offset as usize) < payload_start || end as usize > bytes.len() {
            return Err(Error::Truncated(format!(
                "tensor '{}' spans {}..{} outside file of {} bytes",
                entry.name,
                entry.offset,
                end,
                bytes.len()
            )));
        }
        spans.push((entry.offset, end));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(Error::Truncated("overlapping tensor payloads".into()));
        }
    }

    let find = |name: &str| -> Result<&DirEntry> {
        let mut found = None;
        for e in &dir {
            if e.name == name {
                if found.is_some() {
                    return Err(Error::Truncated(format!("duplicate tensor '{name}'")));
                }
                found = Some(e);
            }
        }
        found.ok_or_else(|| Error::Truncated(format!("missing tensor '{name}'")))
    };
    let tensor_bytes =
        |e: &DirEntry| -> &[u8] { &bytes[e.offset as usize..(e.offset + e.length) as usize] };

    let load_vector = |name: &str, expect_len: usize| -> Result<Vec<f32>> {
        let e = find(name)?;
        if e.format != QuantFormat::F32Ref {
            return Err(Error::Layout(format!("tensor '{name}' must be f32")));
        }
        let v = decode_f32_slice(tensor_bytes(e))?;
        if v.len() != expect_len {
            return Err(Error::ShapeMismatch {
                expected: format!("{name} of {expect_len}"),
                got: format!("{}", v.len()),
            });
        }
        Ok(v)
    };
    let load_linear = |name: &str| -> Result<LinearWeight> {
        let e = find(name)?;
        let rows = e.rows as usize;
        let cols = e.cols as usize;
        Ok(match e.format {
            QuantFormat::F32Ref => {
                LinearWeight::F32(Matrix::new(rows, cols, decode_f32_slice(tensor_bytes(e))?)?)
            }
            QuantFormat::T158 => LinearWeight::Ternary(decode_ternary(tensor_bytes(e), rows, cols)?),
            fmt => LinearWeight::Quantized(decode_quantized(tensor_bytes(e), fmt, rows, cols)?),
        })
    };

    let emb_entry = find("embedding")?;
    let embedding = Matrix::new(
        emb_entry.rows as usize,
        emb_entry.cols as usize,
        decode_f32_slice(tensor_bytes(emb_entry))?,
    )?;

    let d = config.embed_dim;
    let ff = config.ff_dim;
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for i in 0..config.n_blocks {
        blocks.push(BlockWeights {
            attn_norm: NormParams {
                gain: load_vector(&format!("block{i}.attn_norm.gain"), d)?,
                bias: load_vector(&format!("block{i}.attn_norm.bias"), d)?,
            },
            w_query: load_linear(&format!("block{i}.w_query"))?,
            w_key: load_linear(&format!("block{i}.w_key"))?,
            w_value: load_linear(&format!("block{i}.w_value"))?,
            w_attn_out: load_linear(&format!("block{i}.w_attn_out"))?,
            ffn_norm: NormParams {
                gain: load_vector(&format!("block{i}.ffn_norm.gain"), d)?,
                bias: load_vector(&format!("block{i}.ffn_norm.bias"), d)?,
            },
            w_ff_in: load_linear(&format!("block{i}.w_ff_in"))?,
            b_ff_in: load_vector(&format!("block{i}.b_ff_in"), ff)?,
            w_ff_out: load_linear(&format!("block{i}.w_ff_out"))?,
            b_ff_out: load_vector(&format!("block{i}.b_ff_out"), d)?,
        });
    }
    let weights = DecoderWeights {
        config,
        embedding,
        blocks,
        final_norm: NormParams {
            gain: load_vector("final_norm.gain", d)?,
            bias: load_vector("final_norm.bias", d)?,
        },
    };
    weights.validate()?;
    Ok(weights)
}

/// Load a model container from `path`.
pub fn load_model(path: &Path) -> Result<DecoderWeights> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

/// Directory metadata of one stored tensor.
#[derive(Debug, Clone)]
pub struct TensorInfo {
    pub name: String,
    pub format: QuantFormat,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
    pub length: u64,
}

/// Container header and directory, without decoding payloads.
#[derive(Debug, Clone)]
pub struct ContainerInfo {
    pub version: u32,
    pub config: ModelConfig,
    pub payload_crc32: u32,
    pub tensors: Vec<TensorInfo>,
}

impl ContainerInfo {
    /// Achieved storage cost of the non-f32 tensors, in bits per weight.
    pub fn quantized_bits_per_weight(&self) -> Option<f64> {
        let mut bits = 0u64;
        let mut weights = 0u64;
        for t in &self.tensors {
            if t.format != QuantFormat::F32Ref {
                bits += t.length * 8;
                weights += (t.rows * t.cols) as u64;
            }
        }
        (weights > 0).then(|| bits as f64 / weights as f64)
    }
}

/// Read a container's header and tensor directory.
pub fn inspect(bytes: &[u8]) -> Result<ContainerInfo> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let config = ModelConfig {
        embed_dim: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        ff_dim: r.u32()? as usize,
        max_seq_len: r.u32()? as usize,
        n_blocks: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
    };
    let payload_crc32 = r.u32()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Truncated("tensor name not UTF-8".into()))?;
        let format = QuantFormat::from_id(r.take(1)?[0])?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let offset = r.u64()?;
        let length = r.u64()?;
        tensors.push(TensorInfo {
            name,
            format,
            rows,
            cols,
            offset,
            length,
        });
    }
    Ok(ContainerInfo {
        version,
        config,
        payload_crc32,
        tensors,
    })
}

/// Requantize a full-precision model's linear projections to `format`.
/// Errors if any projection is already quantized.
pub fn requantize_model(weights: &DecoderWeights, format: QuantFormat) -> Result<DecoderWeights> {
    let to_format = |w: &LinearWeight| -> Result<LinearWeight> {
        match w {
            LinearWeight::F32(m) => LinearWeight::from_matrix(m.clone(), format),
            other => Err(Error::InvalidArgument(format!(
                "input is already quantized ({}); requantization starts from f32",
                other.format().name()
            ))),
        }
    };
    let mut blocks = Vec::with_capacity(weights.blocks.len());
    for b in &weights.blocks {
        blocks.push(BlockWeights {
            attn_norm: b.attn_norm.clone(),
            w_query: to_format(&b.w_query)?,
            w_key: to_format(&b.w_key)?,
            w_value: to_format(&b.w_value)?,
            w_attn_out: to_format(&b.w_attn_out)?,
            ffn_norm: b.ffn_norm.clone(),
            w_ff_in: to_format(&b.w_ff_in)?,
            b_ff_in: b.b_ff_in.clone(),
            w_ff_out: to_format(&b.w_ff_out)?,
            b_ff_out: b.b_ff_out.clone(),
        });
    }
    Ok(DecoderWeights {
        config: weights.config,
        embedding: weights.embedding.clone(),
        blocks,
        final_norm: weights.final_norm.clone(),
    })
}
