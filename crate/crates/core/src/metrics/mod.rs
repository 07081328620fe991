//! Throughput and energy metrics: TPS, tokens per joule, words per
//! battery life, the dynamic/static power split and real-time
//! classification.
//!
//! TPJ divides by *dynamic* power (energy attributable to inference);
//! W/BL divides by *total* power (a battery powers the whole device).

use serde::{Deserialize, Serialize};

use crate::decoder::{generate, DecoderWeights};
use crate::error::{Error, Result};

/// Battery budget used for W/BL: 5 Wh = 18 kJ.
pub const DEFAULT_BATTERY_JOULES: f64 = 18_000.0;
/// Average tokens per word assumed for W/BL.
pub const DEFAULT_TOKENS_PER_WORD: f64 = 1.5;

/// TPS thresholds for the conversational classes.
pub const REALTIME_TPS: f64 = 3.0;
pub const NEAR_REALTIME_TPS: f64 = 2.0;
pub const DEGRADED_TPS: f64 = 1.5;

/// Real-time suitability buckets, ordered worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RealtimeClass {
    /// Below 1.5 TPS: unusable latency for conversation.
    Unsuitable,
    /// 1.5 to 2 TPS.
    Degraded,
    /// 2 to 3 TPS: functional with slight delays.
    NearRealTime,
    /// 3 TPS and above.
    RealTime,
}

/// Classify a throughput value (monotone step function of TPS).
pub fn classify_realtime(tps: f64) -> RealtimeClass {
    if tps >= REALTIME_TPS {
        RealtimeClass::RealTime
    } else if tps >= NEAR_REALTIME_TPS {
        RealtimeClass::NearRealTime
    } else if tps >= DEGRADED_TPS {
        RealtimeClass::Degraded
    } else {
        RealtimeClass::Unsuitable
    }
}

/// Which phase a power trace was recorded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceLabel {
    /// No model running: mean estimates static power.
    Idle,
    /// Recorded during inference: mean estimates total power.
    Load,
}

/// Timestamped watt samples from a power meter log.
#[derive(Debug, Clone)]
pub struct PowerTrace {
    pub samples: Vec<(f64, f64)>,
    pub label: TraceLabel,
}

impl PowerTrace {
    /// Mean power over the trace, in watts.
    pub fn mean_watts(&self) -> f64 {
        self.samples.iter().map(|&(_, w)| w).sum::<f64>() / self.samples.len() as f64
    }
}

/// Parse a `timestamp_s,power_w` CSV (header required, LF endings).
pub fn ingest_power_log(content: &str, label: TraceLabel) -> Result<PowerTrace> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty power log".into(),
    })?;
    if header.trim() != "timestamp_s,power_w" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header 'timestamp_s,power_w', got '{header}'"),
        });
    }
    let mut samples = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (ts_str, w_str) = line.split_once(',').ok_or(Error::Parse {
            line: line_no,
            message: "expected two comma-separated fields".into(),
        })?;
        let ts: f64 = ts_str.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad timestamp '{ts_str}'"),
        })?;
        let w: f64 = w_str.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad power value '{w_str}'"),
        })?;
        if ts <= last_ts {
            return Err(Error::Parse {
                line: line_no,
                message: format!("timestamps must be strictly increasing ({ts} after {last_ts})"),
            });
        }
        if w < 0.0 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("negative power {w}"),
            });
        }
        last_ts = ts;
        samples.push((ts, w));
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "power log has no samples".into(),
        });
    }
    Ok(PowerTrace { samples, label })
}

/// Derived throughput/energy record for one model configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub latency_ms_per_token: f64,
    /// Tokens per second: 1000 / latency_ms.
    pub tps: f64,
    pub static_w: Option<f64>,
    pub total_w: Option<f64>,
    pub dynamic_w: Option<f64>,
    /// Tokens per joule of dynamic energy.
    pub tpj: Option<f64>,
    /// Words per battery life.
    pub wbl: Option<f64>,
    pub class: RealtimeClass,
}

/// Derive TPS/TPJ/W-BL from a latency and a static/total power pair.
pub fn derive_metrics(
    label: &str,
    latency_ms: f64,
    static_w: f64,
    total_w: f64,
    battery_j: f64,
    tokens_per_word: f64,
) -> Result<BenchReport> {
    if !latency_ms.is_finite() || latency_ms <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "latency must be positive, got {latency_ms}"
        )));
    }
    if static_w < 0.0 {
        return Err(Error::Measurement(format!("negative static power {static_w}")));
    }
    if total_w < static_w {
        return Err(Error::Measurement(format!(
            "total power {total_w} below static power {static_w}"
        )));
    }
    let dynamic_w = total_w - static_w;
    if dynamic_w == 0.0 || total_w == 0.0 {
        return Err(Error::Measurement(
            "zero dynamic or total power, energy metrics undefined".into(),
        ));
    }
    let tps = 1000.0 / latency_ms;
    Ok(BenchReport {
        label: label.to_string(),
        latency_ms_per_token: latency_ms,
        tps,
        static_w: Some(static_w),
        total_w: Some(total_w),
        dynamic_w: Some(dynamic_w),
        tpj: Some(tps / dynamic_w),
        wbl: Some(tps / total_w * (battery_j / tokens_per_word)),
        class: classify_realtime(tps),
    })
}

/// Throughput-only report for runs without power logs.
pub fn throughput_report(label: &str, latency_ms: f64) -> Result<BenchReport> {
    if !latency_ms.is_finite() || latency_ms <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "latency must be positive, got {latency_ms}"
        )));
    }
    let tps = 1000.0 / latency_ms;
    Ok(BenchReport {
        label: label.to_string(),
        latency_ms_per_token: latency_ms,
        tps,
        static_w: None,
        total_w: None,
        dynamic_w: None,
        tpj: None,
        wbl: None,
        class: classify_realtime(tps),
    })
}

/// Per-run latency summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLatency {
    /// Mean per-token latency with the first (warm-up) token excluded.
    pub mean_ms: f64,
    /// All per-token samples, including the warm-up token.
    pub per_token_ms: Vec<f64>,
}

/// Aggregated latency measurement over one or more runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyMeasurement {
    pub runs: Vec<RunLatency>,
    /// Mean of the per-run means.
    pub mean_ms: f64,
    /// Coefficient of variation of run means (None for a single run).
    pub cov: Option<f64>,
}

/// Measure per-token generation latency on a loaded model.
///
/// The first token of each run is treated as warm-up and excluded from
/// means, so `n_tokens` must be at least 2.
pub fn measure_inference(
    weights: &DecoderWeights,
    prompt: &[u32],
    n_tokens: usize,
    runs: usize,
) -> Result<LatencyMeasurement> {
    if n_tokens < 2 {
        return Err(Error::InvalidArgument(
            "n_tokens must be >= 2: the first token is excluded as warm-up".into(),
        ));
    }
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let mut run_stats = Vec::with_capacity(runs);
    for _ in 0..runs {
        let (_, per_token_ms) = generate(weights, prompt, n_tokens)?;
        let mean_ms =
            per_token_ms[1..].iter().sum::<f64>() / (per_token_ms.len() - 1) as f64;
        run_stats.push(RunLatency {
            mean_ms,
            per_token_ms,
        });
    }
    let mean_ms = run_stats.iter().map(|r| r.mean_ms).sum::<f64>() / runs as f64;
    let cov = if runs >= 2 {
        let var = run_stats
            .iter()
            .map(|r| (r.mean_ms - mean_ms).powi(2))
            .sum::<f64>()
            / (runs - 1) as f64;
        Some(var.sqrt() / mean_ms)
    } else {
        None
    };
    Ok(LatencyMeasurement {
        runs: run_stats,
        mean_ms,
        cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn paper_row_llama1b_q2() {
        // latency 67.68 ms, dynamic 2.85 W, total 6.16 W
        let r = derive_metrics(
            "Llama1B_Q2",
            67.68,
            6.16 - 2.85,
            6.16,
            DEFAULT_BATTERY_JOULES,
            DEFAULT_TOKENS_PER_WORD,
        )
        .unwrap();
        assert_close(r.tps, 14.78, 0.01);
        assert_close(r.tpj.unwrap(), 5.18, 0.01);
        assert_close(r.wbl.unwrap(), 2.88e4, 0.01e4);
        assert_eq!(r.class, RealtimeClass::RealTime);
    }

    #[test]
    fn paper_row_bitnet() {
        let r = derive_metrics(
            "BitNet_Q1",
            52.00,
            7.43 - 4.12,
            7.43,
            DEFAULT_BATTERY_JOULES,
            DEFAULT_TOKENS_PER_WORD,
        )
        .unwrap();
        assert_close(r.tps, 19.23, 0.01);
        assert_close(r.tpj.unwrap(), 4.66, 0.01);
        assert_close(r.wbl.unwrap(), 3.11e4, 0.01e4);
    }

    #[test]
    fn paper_row_gemma_fp() {
        let r = derive_metrics(
            "Gemma2B_FP",
            512.03,
            6.97 - 3.65,
            6.97,
            DEFAULT_BATTERY_JOULES,
            DEFAULT_TOKENS_PER_WORD,
        )
        .unwrap();
        assert_close(r.tps, 1.95, 0.01);
        assert_close(r.tpj.unwrap(), 0.53, 0.01);
    }

    #[test]
    fn latency_survives_roundtrip() {
        let latency = 262.81;
        let r = derive_metrics("x", latency, 3.32, 6.45, 18_000.0, 1.5).unwrap();
        assert_eq!(r.latency_ms_per_token, latency);
        assert_close(1000.0 / r.tps, latency, 1e-9);
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify_realtime(14.78), RealtimeClass::RealTime);
        assert_eq!(classify_realtime(3.0), RealtimeClass::RealTime);
        assert_eq!(classify_realtime(2.9), RealtimeClass::NearRealTime);
        assert_eq!(classify_realtime(2.0), RealtimeClass::NearRealTime);
        assert_eq!(classify_realtime(1.7), RealtimeClass::Degraded);
        assert_eq!(classify_realtime(1.5), RealtimeClass::Degraded);
        assert_eq!(classify_realtime(0.03), RealtimeClass::Unsuitable);
    }

    #[test]
    fn power_errors() {
        assert!(matches!(
            derive_metrics("x", 100.0, 6.0, 5.0, 18_000.0, 1.5),
            Err(Error::Measurement(_))
        ));
        assert!(derive_metrics("x", 0.0, 1.0, 2.0, 18_000.0, 1.5).is_err());
    }

    #[test]
    fn power_log_parsing() {
        let trace = ingest_power_log(
            "timestamp_s,power_w\n0.0,6.45\n1.0,6.45\n2.0,6.45\n",
            TraceLabel::Load,
        )
        .unwrap();
        assert_close(trace.mean_watts(), 6.45, 1e-12);

        // idle 3.32 + load 6.45 imply dynamic 3.13 (Llama1B_FP row)
        let idle = ingest_power_log(
            "timestamp_s,power_w\n0.0,3.32\n1.0,3.32\n",
            TraceLabel::Idle,
        )
        .unwrap();
        assert_close(trace.mean_watts() - idle.mean_watts(), 3.13, 1e-9);
    }

    #[test]
    fn power_log_errors_carry_line_numbers() {
        let err = ingest_power_log("timestamp_s,power_w\n0.0,1.0\nbroken\n", TraceLabel::Idle)
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = ingest_power_log(
            "timestamp_s,power_w\n1.0,1.0\n0.5,1.0\n",
            TraceLabel::Idle,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(ingest_power_log("", TraceLabel::Idle).is_err());
        assert!(ingest_power_log("timestamp_s,power_w\n", TraceLabel::Idle).is_err());
    }
}
