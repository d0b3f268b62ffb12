use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fairtrain::{EpochRow, FinalMetrics};
use crate::harness::{AggregateRow, ExperimentConfig, ExperimentReport, RunRecord, RunStatus, VERSION};

/// `%.6g`: six significant digits, trailing zeros trimmed, exponent form
/// outside `[1e-4, 1e6)`.
pub fn format_g6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_g6).unwrap_or_default()
}

pub const RUN_COLUMNS: [&str; 15] = [
    "lambda",
    "seed",
    "mode",
    "status",
    "accuracy",
    "mse",
    "hgr_nn_z",
    "hgr_nn_yhat",
    "hgr_kde_yhat",
    "hgr_rdc_yhat",
    "mine_yhat",
    "fairquant",
    "config_fingerprint",
    "version",
    "error",
];

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv serialization: {e}"))
}

/// One row per run, fixed column order, no timings (those vary between
/// otherwise identical runs and go to `timings.csv`).
pub fn runs_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(RUN_COLUMNS).map_err(csv_err)?;
    for r in records {
        let m = r.result.final_metrics.clone().unwrap_or_default();
        let mut row = vec![
            format_g6(r.lambda),
            r.seed.to_string(),
            r.mode.to_string(),
            status_name(&r.status).to_string(),
        ];
        row.extend(m.values().iter().map(|v| opt(*v)));
        row.push(r.config_fingerprint.clone());
        row.push(r.version.clone());
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    Ok(finish(w))
}

fn status_name(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::Failed => "failed",
    }
}

pub fn epochs_csv(rows: &[EpochRow]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["epoch", "predictor_loss", "task_metric", "adversary_objective"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format_g6(r.predictor_loss),
            format_g6(r.task_metric),
            format_g6(r.adversary_objective),
        ])
        .map_err(csv_err)?;
    }
    Ok(finish(w))
}

pub fn timings_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["lambda", "seed", "runtime_seconds"]).map_err(csv_err)?;
    for r in records {
        w.write_record([format_g6(r.lambda), r.seed.to_string(), format_g6(r.runtime_seconds)])
            .map_err(csv_err)?;
    }
    Ok(finish(w))
}

#[derive(Serialize)]
struct SummaryRun<'a> {
    lambda: f64,
    seed: u64,
    status: &'a RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    final_metrics: Option<&'a FinalMetrics>,
}

#[derive(Serialize)]
struct Summary<'a> {
    version: &'a str,
    config_fingerprint: &'a str,
    config: ExperimentConfig,
    metric_keys: &'a [&'a str],
    aggregates: &'a [AggregateRow],
    runs: Vec<SummaryRun<'a>>,
}

/// Aggregates at full precision plus each run's final metrics. The output
/// directory is left out so identical configs give identical bytes.
pub fn summary_json(report: &ExperimentReport) -> Result<Vec<u8>> {
    let summary = Summary {
        version: VERSION,
        config_fingerprint: &report.fingerprint,
        config: ExperimentConfig {
            output_dir: None,
            ..report.config.clone()
        },
        metric_keys: &FinalMetrics::KEYS,
        aggregates: &report.aggregates,
        runs: report
            .records
            .iter()
            .map(|r| SummaryRun {
                lambda: r.lambda,
                seed: r.seed,
                status: &r.status,
                error: r.error.as_deref(),
                final_metrics: r.result.final_metrics.as_ref(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn epochs_file_name(r: &RunRecord) -> String {
    format!("lambda_{}_seed_{}.csv", format_g6(r.lambda), r.seed)
}

/// Writes `runs.csv`, `summary.json`, `timings.csv` and `epochs/<run>.csv`
/// under `dir`. Returns the paths written.
pub fn emit_reports(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let epochs_dir = dir.join("epochs");
    fs::create_dir_all(&epochs_dir).map_err(|e| Error::io(&epochs_dir, e))?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: Vec<u8>| -> Result<()> {
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    put(dir.join("runs.csv"), runs_csv(&report.records)?)?;
    put(dir.join("summary.json"), summary_json(report)?)?;
    put(dir.join("timings.csv"), timings_csv(&report.records)?)?;
    for r in &report.records {
        put(epochs_dir.join(epochs_file_name(r)), epochs_csv(&r.result.epochs)?)?;
    }
    Ok(written)
}
