//! `qedge bench`: measure per-token latency on a model container and
//! derive throughput/energy metrics, optionally from power logs.

use std::path::{Path, PathBuf};

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use qedge_core::io::{inspect, model_from_bytes};
use qedge_core::metrics::{
    derive_metrics, ingest_power_log, measure_inference, throughput_report, BenchReport,
    LatencyMeasurement, TraceLabel,
};

use crate::commands::write_json;
use crate::manifest::RunManifest;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct BenchArgs {
    /// Model container to benchmark.
    #[arg(long)]
    pub model: PathBuf,
    /// Seeded prompt length in tokens.
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    /// Tokens to generate per run (>= 2; the first is warm-up).
    #[arg(long, default_value_t = 32)]
    pub gen_len: usize,
    /// Measurement repetitions.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Idle-phase power log (CSV). Requires --power-load.
    #[arg(long)]
    pub power_idle: Option<PathBuf>,
    /// Load-phase power log (CSV). Requires --power-idle.
    #[arg(long)]
    pub power_load: Option<PathBuf>,
    /// Report path; `.json` or `.csv` by extension. A `series.csv` of
    /// per-token latencies is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Seed for the synthetic prompt.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Row label in the report (defaults to the model file stem).
    #[arg(long)]
    pub label: Option<String>,
    /// Skip measurement and derive metrics from this latency instead.
    #[arg(long)]
    pub latency_ms: Option<f64>,
    /// Battery budget in joules for W/BL.
    #[arg(long, default_value_t = qedge_core::metrics::DEFAULT_BATTERY_JOULES)]
    pub battery_j: f64,
    /// Tokens-per-word assumption for W/BL.
    #[arg(long, default_value_t = qedge_core::metrics::DEFAULT_TOKENS_PER_WORD)]
    pub tokens_per_word: f64,
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn run(args: BenchArgs) -> CliResult {
    let model_bytes = read_file(&args.model)?;
    let info = inspect(&model_bytes)?;
    let label = args.label.clone().unwrap_or_else(|| {
        args.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });

    // power logs come as a pair or not at all
    let powers = match (&args.power_idle, &args.power_load) {
        (Some(idle), Some(load)) => {
            let idle_trace = ingest_power_log(
                &String::from_utf8_lossy(&read_file(idle)?),
                TraceLabel::Idle,
            )?;
            let load_trace = ingest_power_log(
                &String::from_utf8_lossy(&read_file(load)?),
                TraceLabel::Load,
            )?;
            Some((idle_trace.mean_watts(), load_trace.mean_watts()))
        }
        (None, None) => None,
        _ => {
            return Err(CliError::Input(
                "--power-idle and --power-load must be given together".into(),
            ))
        }
    };

    // measure, unless a latency was injected
    let (latency_ms, measurement) = match args.latency_ms {
        Some(latency) => {
            if !latency.is_finite() || latency <= 0.0 {
                return Err(CliError::Input(format!("--latency-ms must be positive, got {latency}")));
            }
            (latency, None)
        }
        None => {
            if args.gen_len < 2 {
                return Err(CliError::Input("--gen-len must be >= 2 (first token is warm-up)".into()));
            }
            if args.prompt_len == 0 {
                return Err(CliError::Input("--prompt-len must be >= 1".into()));
            }
            if args.prompt_len + args.gen_len > info.config.max_seq_len {
                return Err(CliError::Input(format!(
                    "prompt {} + gen {} exceeds model context {}",
                    args.prompt_len, args.gen_len, info.config.max_seq_len
                )));
            }
            // measurement runs pin a single worker unless the caller
            // overrides QEDGE_THREADS; must happen before the kernel
            // pool first initializes
            if std::env::var_os("QEDGE_THREADS").is_none() {
                std::env::set_var("QEDGE_THREADS", "1");
            }
            let weights = model_from_bytes(&model_bytes)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let prompt: Vec<u32> = (0..args.prompt_len)
                .map(|_| rng.gen_range(0..info.config.vocab_size as u32))
                .collect();
            let m = measure_inference(&weights, &prompt, args.gen_len, args.runs)
                .map_err(|e| CliError::Measurement(e.to_string()))?;
            (m.mean_ms, Some(m))
        }
    };

    let report: BenchReport = match powers {
        Some((static_w, total_w)) => derive_metrics(
            &label,
            latency_ms,
            static_w,
            total_w,
            args.battery_j,
            args.tokens_per_word,
        )?,
        None => throughput_report(&label, latency_ms)?,
    };

    let manifest = RunManifest::new(
        "bench",
        json!({
            "model": args.model.display().to_string(),
            "prompt_len": args.prompt_len,
            "gen_len": args.gen_len,
            "runs": args.runs,
            "power_idle": args.power_idle.as_ref().map(|p| p.display().to_string()),
            "power_load": args.power_load.as_ref().map(|p| p.display().to_string()),
            "latency_ms": args.latency_ms,
            "battery_j": args.battery_j,
            "tokens_per_word": args.tokens_per_word,
        }),
    )
    .with_seed(args.seed)
    .with_model(&args.model, &model_bytes, &info.config);

    let series_path = args
        .report
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("series.csv");
    write_series(&series_path, measurement.as_ref())?;

    let doc = json!({
        "kind": "bench",
        "manifest": manifest,
        "report": report,
        "measurement": measurement_json(measurement.as_ref()),
        "series_csv": series_path.display().to_string(),
        "timing_note": "latency and throughput fields are wall-clock measurements and vary between runs",
    });

    match args.report.extension().and_then(|e| e.to_str()) {
        Some("json") | None => write_json(&args.report, &doc)?,
        Some("csv") => write_csv_report(&args.report, &report)?,
        Some(other) => {
            return Err(CliError::Input(format!(
                "unsupported report extension '{other}' (use .json or .csv)"
            )))
        }
    }

    println!(
        "{label}: {:.2} ms/token, {:.2} TPS ({:?}), tpj {}, wbl {}",
        report.latency_ms_per_token,
        report.tps,
        report.class,
        report
            .tpj
            .map_or("n/a".into(), |v| format!("{v:.2}")),
        report
            .wbl
            .map_or("n/a".into(), |v| format!("{v:.3e}")),
    );
    println!("report: {}", args.report.display());
    Ok(())
}

fn measurement_json(m: Option<&LatencyMeasurement>) -> serde_json::Value {
    match m {
        None => json!({ "measured": false }),
        Some(m) => json!({
            "measured": true,
            "pooled_mean_ms": m.mean_ms,
            "cov": m.cov,
            "run_means_ms": m.runs.iter().map(|r| r.mean_ms).collect::<Vec<_>>(),
        }),
    }
}

/// Per-token latency samples: `token_index,run,latency_ms`.
fn write_series(path: &Path, m: Option<&LatencyMeasurement>) -> Result<(), CliError> {
    let mut out = String::from("token_index,run,latency_ms\n");
    if let Some(m) = m {
        for (run_idx, run) in m.runs.iter().enumerate() {
            for (tok_idx, ms) in run.per_token_ms.iter().enumerate() {
                out.push_str(&format!("{tok_idx},{run_idx},{ms:.6}\n"));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_csv_report(path: &Path, r: &BenchReport) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut out =
        String::from("label,latency_ms_per_token,tps,static_w,total_w,dynamic_w,tpj,wbl,class\n");
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{:?}\n",
        r.label,
        r.latency_ms_per_token,
        r.tps,
        opt(r.static_w),
        opt(r.total_w),
        opt(r.dynamic_w),
        opt(r.tpj),
        opt(r.wbl),
        r.class
    ));
    std::fs::write(path, out)?;
    Ok(())
}
