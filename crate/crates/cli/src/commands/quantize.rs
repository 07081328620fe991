//! `qedge quantize`: requantize a full-precision container.

use std::path::PathBuf;

use clap::Args;

use qedge_core::io::{inspect, model_from_bytes, model_to_bytes, requantize_model};
use qedge_core::quant::QuantFormat;

use crate::{CliError, CliResult};

#[derive(Args)]
pub struct QuantizeArgs {
    /// Input container (must hold f32 linear weights).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target format: q8, q6k, q4k, q2k or t1_58.
    #[arg(long)]
    pub format: String,
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: QuantizeArgs) -> CliResult {
    let format = QuantFormat::parse(&args.format)?;
    if format == QuantFormat::F32Ref {
        return Err(CliError::Input("target format must be quantized".into()));
    }
    let bytes = std::fs::read(&args.input)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.input.display())))?;
    let weights = model_from_bytes(&bytes)?;
    let quantized = requantize_model(&weights, format)?;
    let out_bytes = model_to_bytes(&quantized)?;
    std::fs::write(&args.out, &out_bytes)?;

    let info = inspect(&out_bytes)?;
    let bits = info
        .quantized_bits_per_weight()
        .ok_or_else(|| CliError::Input("no quantized tensors in output".into()))?;
    println!(
        "wrote {} ({} bytes): {:.4} bits/weight achieved",
        args.out.display(),
        out_bytes.len(),
        bits
    );
    Ok(())
}
