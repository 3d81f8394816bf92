//! Artifact emission: metrics/probe CSVs, JSON records, the aggregate
//! summary table, and SVG plots. Every writer is byte-deterministic for
//! identical inputs: fixed row order, shortest-roundtrip float text, no
//! timestamps.

pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::diag::DiagnosticsLog;
use crate::error::{Error, Result};
use crate::harness::{Aggregate, Regime, RunReport, StrategyKind};
use crate::probes::ProbeReport;

/// Fixed header of the per-step metrics CSV.
pub const METRICS_CSV_HEADER: &str = "step,layer,metric,value";
/// Fixed header of the probe accuracy CSV.
pub const PROBE_CSV_HEADER: &str = "layer,kind,accuracy,seed";

pub const METRIC_ENTROPY: &str = "attention_entropy";
pub const METRIC_ACT_GRAD: &str = "activation_grad_norm";
pub const METRIC_PARAM_GRAD: &str = "param_grad_norm";

/// One row per step x layer x metric, steps outermost, metrics in the
/// fixed order entropy / activation / parameter.
pub fn metrics_csv(diag: &DiagnosticsLog) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for step in 0..diag.steps() {
        for layer in &diag.layers {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                step, layer.layer, METRIC_ENTROPY, layer.entropy[step]
            );
            let _ = writeln!(
                out,
                "{},{},{},{}",
                step, layer.layer, METRIC_ACT_GRAD, layer.activation_grad_norm[step]
            );
            let _ = writeln!(
                out,
                "{},{},{},{}",
                step, layer.layer, METRIC_PARAM_GRAD, layer.param_grad_norm[step]
            );
        }
    }
    out
}

/// Parse a metrics CSV back into a diagnostics log. Order-insensitive,
/// but every (step, layer) cell must be present for all three metrics.
pub fn parse_metrics_csv(text: &str) -> Result<DiagnosticsLog> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != METRICS_CSV_HEADER {
        return Err(Error::Format(format!(
            "bad metrics header {header:?}, expected {METRICS_CSV_HEADER:?}"
        )));
    }
    let mut rows: Vec<(usize, usize, String, f64)> = Vec::new();
    let mut max_layer = 0usize;
    let mut max_step = 0usize;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("metrics row {} malformed", ln + 2)));
        }
        let step: usize = parts[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad step at row {}", ln + 2)))?;
        let layer: usize = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad layer at row {}", ln + 2)))?;
        let value: f64 = parts[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad value at row {}", ln + 2)))?;
        max_layer = max_layer.max(layer);
        max_step = max_step.max(step);
        rows.push((step, layer, parts[2].to_string(), value));
    }
    if rows.is_empty() {
        return Err(Error::Format("metrics CSV has no data rows".into()));
    }
    let layers = max_layer + 1;
    let steps = max_step + 1;
    let mut log = DiagnosticsLog::new(layers);
    for layer in &mut log.layers {
        layer.entropy = vec![f64::NAN; steps];
        layer.activation_grad_norm = vec![f64::NAN; steps];
        layer.param_grad_norm = vec![f64::NAN; steps];
    }
    for (step, layer, metric, value) in rows {
        let slot = &mut log.layers[layer];
        match metric.as_str() {
            METRIC_ENTROPY => slot.entropy[step] = value,
            METRIC_ACT_GRAD => slot.activation_grad_norm[step] = value,
            METRIC_PARAM_GRAD => slot.param_grad_norm[step] = value,
            other => {
                return Err(Error::Format(format!("unknown metric {other:?}")));
            }
        }
    }
    for layer in &log.layers {
        if layer.entropy.iter().any(|v| v.is_nan())
            || layer.activation_grad_norm.iter().any(|v| v.is_nan())
            || layer.param_grad_norm.iter().any(|v| v.is_nan())
        {
            return Err(Error::Format(format!(
                "metrics CSV misses cells for layer {}",
                layer.layer
            )));
        }
    }
    Ok(log)
}

/// Probe accuracies, one row per layer and probe kind.
pub fn probe_csv(report: &ProbeReport) -> String {
    let mut out = String::new();
    out.push_str(PROBE_CSV_HEADER);
    out.push('\n');
    for (layer, acc) in report.linear.iter().enumerate() {
        let _ = writeln!(out, "{},linear,{},{}", layer, acc, report.seed);
    }
    for (layer, acc) in report.mlp.iter().enumerate() {
        let _ = writeln!(out, "{},mlp,{},{}", layer, acc, report.seed);
    }
    out
}

/// Pretty JSON with a trailing newline; field order follows the struct.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("json encode: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_pretty(value)?)
}

pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("run report decode: {e}")))
}

/// Summary table: one row per strategy, accuracy mean ± std per regime,
/// plus the trainable-parameter count.
pub fn aggregate_table(agg: &Aggregate) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>12} {:>20} {:>20}",
        "method", "params", "UNDER acc", "OVER acc"
    );
    let mut kinds: Vec<StrategyKind> = agg.cells.iter().map(|c| c.strategy).collect();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        let cell = |regime: Regime| {
            agg.cells
                .iter()
                .find(|c| c.strategy == kind && c.regime == regime)
        };
        let fmt = |c: Option<&crate::harness::AggregateCell>| match c {
            Some(c) => format!("{:.4}±{:.4}", c.accuracy_mean, c.accuracy_std),
            None => "-".to_string(),
        };
        let params = cell(Regime::Under)
            .or_else(|| cell(Regime::Over))
            .map_or(0, |c| c.trainable_params);
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>20} {:>20}",
            kind.as_str(),
            params,
            fmt(cell(Regime::Under)),
            fmt(cell(Regime::Over)),
        );
    }
    if agg.partial {
        let _ = writeln!(out, "partial: {} failed run(s)", agg.failed.len());
        for f in &agg.failed {
            let _ = writeln!(
                out,
                "  failed {} {} seed {}: {}",
                f.regime.as_str(),
                f.strategy.as_str(),
                f.seed,
                f.error
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log() -> DiagnosticsLog {
        let mut log = DiagnosticsLog::new(2);
        log.record_step(&[1.5, 2.5], &[0.1, 0.2], &[0.0, 0.3]).unwrap();
        log.record_step(&[1.25, 2.0], &[0.15, 0.25], &[0.0, 0.35])
            .unwrap();
        log
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let log = sample_log();
        let text = metrics_csv(&log);
        assert!(text.starts_with("step,layer,metric,value\n"));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn metrics_csv_is_byte_deterministic() {
        let log = sample_log();
        assert_eq!(metrics_csv(&log), metrics_csv(&log));
    }

    #[test]
    fn metrics_parse_rejects_bad_input() {
        assert!(parse_metrics_csv("nope\n0,0,attention_entropy,1").is_err());
        assert!(parse_metrics_csv("step,layer,metric,value\n").is_err());
        // missing param_grad cell for layer 0
        let partial = "step,layer,metric,value\n0,0,attention_entropy,1\n0,0,activation_grad_norm,1\n";
        assert!(parse_metrics_csv(partial).is_err());
    }

    #[test]
    fn probe_csv_shape() {
        let report = ProbeReport {
            linear: vec![0.5, 0.75],
            mlp: vec![0.6, 0.8],
            train_size: 10,
            val_size: 5,
            seed: 9,
        };
        let text = probe_csv(&report);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PROBE_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "0,linear,0.5,9");
        assert_eq!(lines[4], "1,mlp,0.8,9");
    }
}
