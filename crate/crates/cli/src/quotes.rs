//! Published figures the metrics engine must reproduce from the
//! latency/power table, with their displayed precision.
//!
//! A derived value passes against a quote when it is within the
//! tolerance outright, or when rounding it to the quote's significant
//! digits reproduces the quote exactly (the quotes are displayed
//! rounded, so e.g. a derived 12361 W/BL legitimately appears as
//! 1.2e4).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Tps,
    Tpj,
    Wbl,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Tps => "tps",
            Metric::Tpj => "tpj",
            Metric::Wbl => "wbl",
        }
    }
}

/// One quoted scalar: row label, metric, displayed value, significant
/// digits of the display, relative tolerance.
pub struct Quote {
    pub label: &'static str,
    pub metric: Metric,
    pub value: f64,
    pub sig_figs: i32,
    pub tolerance: f64,
}

const fn q(label: &'static str, metric: Metric, value: f64, sig_figs: i32) -> Quote {
    Quote {
        label,
        metric,
        value,
        sig_figs,
        tolerance: 0.01,
    }
}

/// Scalar values quoted in the results discussion and figure captions.
pub const QUOTES: &[Quote] = &[
    // throughput
    q("Llama1B_FP", Metric::Tps, 3.81, 3),
    q("Llama1B_Q2", Metric::Tps, 14.78, 4),
    q("Gemma2B_FP", Metric::Tps, 1.95, 3),
    q("Gemma2_Q2", Metric::Tps, 6.67, 3),
    q("Llama8B_FP", Metric::Tps, 0.03, 1),
    q("Llama8B_Q4", Metric::Tps, 2.14, 3),
    q("Llama8B_Q8", Metric::Tps, 0.12, 2),
    q("Llama8B_Q6", Metric::Tps, 1.38, 3),
    q("BitNet_Q1", Metric::Tps, 19.23, 4),
    // tokens per joule
    q("Llama1B_Q2", Metric::Tpj, 5.18, 3),
    q("Llama1B_FP", Metric::Tpj, 1.21, 3),
    q("BitNet_Q1", Metric::Tpj, 4.66, 3),
    q("Gemma2B_FP", Metric::Tpj, 0.53, 2),
    q("Gemma2_Q2", Metric::Tpj, 2.11, 3),
    // words per battery life
    q("Llama1B_Q2", Metric::Wbl, 2.9e4, 2),
    q("Gemma2B_FP", Metric::Wbl, 3.4e3, 2),
    q("Gemma2_Q2", Metric::Wbl, 1.2e4, 2),
    q("Llama3B_FP", Metric::Wbl, 2.8e3, 2),
    q("Llama3B_Q2", Metric::Wbl, 9.0e3, 2),
    q("Llama8B_FP", Metric::Wbl, 5.9e1, 2),
    q("Llama8B_Q2", Metric::Wbl, 3.6e3, 2),
    q("Phi3B_FP", Metric::Wbl, 1.8e2, 2),
    q("Phi3B_Q2", Metric::Wbl, 7.5e3, 2),
    q("BitNet_Q1", Metric::Wbl, 3.1e4, 2),
];

/// Quoted ratio between two rows of the table.
pub struct RatioQuote {
    pub numerator: &'static str,
    pub denominator: &'static str,
    pub metric: Metric,
    pub value: f64,
    pub tolerance: f64,
}

/// Quoted accelerations and efficiency ratios.
pub const RATIO_QUOTES: &[RatioQuote] = &[
    RatioQuote {
        numerator: "Llama1B_Q2",
        denominator: "Llama1B_FP",
        metric: Metric::Tps,
        value: 3.88,
        tolerance: 0.02,
    },
    RatioQuote {
        numerator: "Llama8B_Q4",
        denominator: "Llama8B_FP",
        metric: Metric::Tps,
        value: 71.0,
        tolerance: 0.02,
    },
    RatioQuote {
        numerator: "Llama1B_Q2",
        denominator: "Llama1B_FP",
        metric: Metric::Tpj,
        value: 4.3,
        tolerance: 0.01,
    },
    RatioQuote {
        numerator: "Llama1B_Q2",
        denominator: "BitNet_Q1",
        metric: Metric::Tpj,
        value: 1.11,
        tolerance: 0.01,
    },
    RatioQuote {
        numerator: "Llama8B_Q2",
        denominator: "Llama8B_FP",
        metric: Metric::Wbl,
        value: 61.0,
        tolerance: 0.01,
    },
    RatioQuote {
        numerator: "Llama3B_Q2",
        denominator: "Llama3B_FP",
        metric: Metric::Wbl,
        value: 3.2,
        tolerance: 0.01,
    },
    RatioQuote {
        numerator: "BitNet_Q1",
        denominator: "Llama1B_Q2",
        metric: Metric::Wbl,
        value: 1.07,
        tolerance: 0.01,
    },
];

/// Round to `sig_figs` significant digits, half away from zero.
pub fn round_to_sig(value: f64, sig_figs: i32) -> f64 {
    if value == 0.0 {
        return 0.0;
    }
    let magnitude = value.abs().log10().floor() as i32;
    let scale = 10f64.powi(sig_figs - 1 - magnitude);
    (value * scale).round() / scale
}

/// The quote comparison rule.
pub fn matches_quote(derived: f64, quoted: f64, sig_figs: i32, tolerance: f64) -> bool {
    let raw = (derived - quoted).abs() / quoted.abs();
    if raw <= tolerance {
        return true;
    }
    let rounded = round_to_sig(derived, sig_figs);
    (rounded - quoted).abs() / quoted.abs() <= tolerance
}
