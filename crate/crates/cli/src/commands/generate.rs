//! `qedge generate-model`: seeded synthetic model containers.

use std::path::PathBuf;

use clap::Args;

use qedge_core::decoder::ModelConfig;
use qedge_core::io::{crc32, model_to_bytes, synth::gen_synthetic_model};
use qedge_core::quant::QuantFormat;

use crate::{CliError, CliResult};

#[derive(Args)]
pub struct GenerateArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 256)]
    pub d: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    /// Feed-forward size.
    #[arg(long, default_value_t = 1024)]
    pub dff: usize,
    /// Decoder block count.
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Vocabulary size.
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    /// Maximum sequence length.
    #[arg(long, default_value_t = 256)]
    pub ctx: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Weight format: f32, q8, q6k, q4k, q2k or t1_58.
    #[arg(long, default_value = "q4k")]
    pub format: String,
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: GenerateArgs) -> CliResult {
    let format = QuantFormat::parse(&args.format)?;
    let config = ModelConfig {
        embed_dim: args.d,
        n_heads: args.h,
        ff_dim: args.dff,
        max_seq_len: args.ctx,
        n_blocks: args.layers,
        vocab_size: args.vocab,
    };
    let weights = gen_synthetic_model(&config, args.seed, format)?;
    let bytes = model_to_bytes(&weights)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, &bytes).map_err(|e| CliError::Input(e.to_string()))?;
    println!(
        "wrote {} ({} bytes, {} weights, crc32:{:08x})",
        args.out.display(),
        bytes.len(),
        format.name(),
        crc32(&bytes)
    );
    Ok(())
}
