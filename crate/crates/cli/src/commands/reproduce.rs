//! `qedge reproduce-table`: re-derive every row of the published
//! latency/power table and diff the derived TPS/TPJ/W-BL against the
//! figures quoted in the results discussion.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use qedge_core::metrics::{
    derive_metrics, BenchReport, DEFAULT_BATTERY_JOULES, DEFAULT_TOKENS_PER_WORD,
};

use crate::commands::write_json;
use crate::manifest::RunManifest;
use crate::quotes::{matches_quote, round_to_sig, Metric, QUOTES, RATIO_QUOTES};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct ReproduceArgs {
    /// Table fixture: CSV of `label,latency_ms,dynamic_w,total_w`.
    #[arg(long)]
    pub table: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct TableRow {
    label: String,
    latency_ms: f64,
    dynamic_w: f64,
    total_w: f64,
}

fn parse_table(content: &str) -> Result<Vec<TableRow>, CliError> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::Input("empty table fixture".into()))?;
    if header.trim() != "label,latency_ms,dynamic_w,total_w" {
        return Err(CliError::Input(format!(
            "expected header 'label,latency_ms,dynamic_w,total_w', got '{header}'"
        )));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CliError::Input(format!(
                "line {}: expected 4 fields, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64, CliError> {
            s.trim()
                .parse()
                .map_err(|_| CliError::Input(format!("line {}: bad {what} '{s}'", idx + 1)))
        };
        rows.push(TableRow {
            label: fields[0].trim().to_string(),
            latency_ms: num(fields[1], "latency")?,
            dynamic_w: num(fields[2], "dynamic power")?,
            total_w: num(fields[3], "total power")?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Input("table fixture has no rows".into()));
    }
    Ok(rows)
}

fn metric_value(report: &BenchReport, metric: Metric) -> f64 {
    match metric {
        Metric::Tps => report.tps,
        Metric::Tpj => report.tpj.expect("table rows carry power"),
        Metric::Wbl => report.wbl.expect("table rows carry power"),
    }
}

pub fn run(args: ReproduceArgs) -> CliResult {
    let content = std::fs::read_to_string(&args.table)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.table.display())))?;
    let rows = parse_table(&content)?;

    let mut derived: HashMap<String, BenchReport> = HashMap::new();
    let mut flagged: Vec<String> = Vec::new();
    let mut row_docs = Vec::new();
    for row in &rows {
        // table carries dynamic power; the engine wants the static split
        let static_w = row.total_w - row.dynamic_w;
        if static_w < 0.0 {
            flagged.push(row.label.clone());
            println!(
                "{:<14} FLAGGED: total {} W below dynamic {} W",
                row.label, row.total_w, row.dynamic_w
            );
            row_docs.push(json!({
                "label": row.label,
                "latency_ms": row.latency_ms,
                "dynamic_w": row.dynamic_w,
                "total_w": row.total_w,
                "error": "total power below dynamic power",
            }));
            continue;
        }
        let report = derive_metrics(
            &row.label,
            row.latency_ms,
            static_w,
            row.total_w,
            DEFAULT_BATTERY_JOULES,
            DEFAULT_TOKENS_PER_WORD,
        )?;
        println!(
            "{:<14} {:>10.2} ms  {:>7.2} TPS  {:>6.2} TPJ  {:>10.3e} W/BL  {:?}",
            report.label,
            report.latency_ms_per_token,
            report.tps,
            report.tpj.unwrap(),
            report.wbl.unwrap(),
            report.class
        );
        row_docs.push(serde_json::to_value(&report).expect("report serializes"));
        derived.insert(row.label.clone(), report);
    }

    // diff against the quoted figures
    let mut quote_docs = Vec::new();
    let mut failures: Vec<String> = flagged
        .iter()
        .map(|l| format!("row {l} violates the power invariant"))
        .collect();
    for quote in QUOTES {
        let (status, value) = match derived.get(quote.label) {
            None => (false, None),
            Some(report) => {
                let v = metric_value(report, quote.metric);
                (
                    matches_quote(v, quote.value, quote.sig_figs, quote.tolerance),
                    Some(v),
                )
            }
        };
        let line = format!(
            "{} {} quoted {} derived {}",
            quote.label,
            quote.metric.name(),
            quote.value,
            value.map_or("missing row".into(), |v| format!(
                "{v:.4} (displays as {})",
                round_to_sig(v, quote.sig_figs)
            )),
        );
        println!("  [{}] {line}", if status { "ok" } else { "DIFF" });
        if !status {
            failures.push(line.clone());
        }
        quote_docs.push(json!({
            "label": quote.label,
            "metric": quote.metric.name(),
            "quoted": quote.value,
            "derived": value,
            "pass": status,
        }));
    }
    for rq in RATIO_QUOTES {
        let value = match (derived.get(rq.numerator), derived.get(rq.denominator)) {
            (Some(n), Some(d)) => {
                Some(metric_value(n, rq.metric) / metric_value(d, rq.metric))
            }
            _ => None,
        };
        let status = value
            .map(|v| (v - rq.value).abs() / rq.value <= rq.tolerance)
            .unwrap_or(false);
        let line = format!(
            "{}/{} {} ratio quoted {}x derived {}",
            rq.numerator,
            rq.denominator,
            rq.metric.name(),
            rq.value,
            value.map_or("missing rows".into(), |v| format!("{v:.3}x")),
        );
        println!("  [{}] {line}", if status { "ok" } else { "DIFF" });
        if !status {
            failures.push(line.clone());
        }
        quote_docs.push(json!({
            "numerator": rq.numerator,
            "denominator": rq.denominator,
            "metric": rq.metric.name(),
            "quoted_ratio": rq.value,
            "derived_ratio": value,
            "pass": status,
        }));
    }

    let all_pass = failures.is_empty();
    println!(
        "{}: {} rows, {} quoted figures checked, {} failures",
        if all_pass { "PASS" } else { "FAIL" },
        rows.len(),
        QUOTES.len() + RATIO_QUOTES.len(),
        failures.len()
    );

    if let Some(out) = &args.out {
        let manifest = RunManifest::new(
            "reproduce-table",
            json!({ "table": args.table.display().to_string() }),
        );
        write_json(
            out,
            &json!({
                "kind": "reproduce_table",
                "manifest": manifest,
                "rows": row_docs,
                "quotes": quote_docs,
                "summary": {
                    "rows": rows.len(),
                    "quotes_checked": QUOTES.len() + RATIO_QUOTES.len(),
                    "failures": failures,
                    "all_pass": all_pass,
                },
            }),
        )?;
    }

    if all_pass {
        Ok(())
    } else {
        Err(CliError::Diff(format!(
            "{} quoted figures not reproduced",
            failures.len()
        )))
    }
}
