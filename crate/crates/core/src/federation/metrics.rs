//! Per-round records and their CSV form.

use std::io::Write;

use super::diagnostics::BoundRecord;
use crate::error::Result;

/// One row per round. Fields that do not apply to a scheme are NaN;
/// `eval_accuracy` is `None` for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_loss: f64,
    pub grad_norm: f64,
    pub agg_error: f64,
    pub gram_preservation_err: f64,
    pub truncation_loss: f64,
    pub delta_proc: f64,
    pub lambda_min: f64,
    pub sigma_min_cross: f64,
    pub omega: f64,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub eval_accuracy: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "round",
    "global_loss",
    "grad_norm",
    "agg_error",
    "gram_preservation_err",
    "truncation_loss",
    "delta_proc",
    "lambda_min",
    "sigma_min_cross",
    "omega",
    "uplink_params",
    "downlink_params",
    "eval_accuracy",
];

pub const DIAGNOSTIC_COLUMNS: [&str; 14] = [
    "round",
    "lambda_min",
    "running_lambda_min",
    "omega",
    "delta_proc",
    "sigma_min_cross",
    "psi",
    "c_a",
    "c_tilde_a",
    "gap_term",
    "residual_term",
    "drift_term",
    "omega_positive",
    "drift_defined",
];

/// 17 significant digits.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.16e}")
    }
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_record(&self) -> [String; 13] {
        [
            self.round.to_string(),
            format_float(self.global_loss),
            format_float(self.grad_norm),
            format_float(self.agg_error),
            format_float(self.gram_preservation_err),
            format_float(self.truncation_loss),
            format_float(self.delta_proc),
            format_float(self.lambda_min),
            format_float(self.sigma_min_cross),
            format_float(self.omega),
            self.uplink_params.to_string(),
            self.downlink_params.to_string(),
            format_opt(self.eval_accuracy),
        ]
    }
}

impl BoundRecord {
    pub fn csv_record(&self) -> [String; 14] {
        [
            self.round.to_string(),
            format_float(self.lambda_min),
            format_float(self.running_lambda_min),
            format_float(self.omega),
            format_float(self.delta_proc),
            format_float(self.sigma_min_cross),
            format_float(self.psi),
            format_float(self.c_a),
            format_float(self.c_tilde_a),
            format_opt(self.gap_term),
            format_opt(self.residual_term),
            format_opt(self.drift_term),
            self.omega_positive.to_string(),
            self.drift_defined.to_string(),
        ]
    }
}

/// Streams `RoundMetrics` rows with a header.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRIC_COLUMNS)?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        self.inner.write_record(m.csv_record())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error().into())
    }
}

pub fn write_diagnostics<W: Write>(out: W, records: &[BoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DIAGNOSTIC_COLUMNS)?;
    for r in records {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
