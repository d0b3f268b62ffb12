//! Config-driven experiments: parse a TOML config, run the `λ × seed` grid on
//! a worker pool, and write CSV/JSON reports.

pub mod config;
pub mod ingest;
pub mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fairtrain::{evaluate, train_mode, FairRunResult, FinalMetrics, TrainMode};
use crate::rng::SeededRng;
use crate::synthetic::{gen_symmetric_bias, gen_toy, SymmetricBiasParams, ToyScenarioParams};

pub use config::{parse_config, CsvSchema, ExperimentConfig, Scenario, TrainSettings};
pub use ingest::{ingest_csv, read_columns, Ingested};
pub use report::{emit_reports, format_g6};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

const STREAM_DATA: u64 = 101;
const STREAM_SPLIT: u64 = 102;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub lambda: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub config_fingerprint: String,
    pub version: String,
    pub runtime_seconds: f64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub result: FairRunResult,
}

/// Sample mean and standard deviation over successful runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// `None` with fewer than two values.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub lambda: f64,
    pub successes: usize,
    pub failures: usize,
    /// One entry per key of [`FinalMetrics::KEYS`]; `None` when no
    /// successful run produced the metric.
    pub metrics: BTreeMap<String, Option<Stat>>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

fn worker_threads() -> usize {
    std::env::var("RENYI_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Full dataset for one seed (synthetic scenarios draw a fresh sample per
/// seed; CSV data is loaded once by the caller).
fn scenario_data(cfg: &ExperimentConfig, seed: u64, loaded: Option<&Dataset>) -> Dataset {
    let data_seed = SeededRng::derive(seed, STREAM_DATA).next_seed();
    match (&cfg.scenario, loaded) {
        (Scenario::Toy, _) => gen_toy(ToyScenarioParams { n: cfg.n, seed: data_seed }),
        (Scenario::Arctan, _) => gen_symmetric_bias(SymmetricBiasParams { n: cfg.n, seed: data_seed }),
        (Scenario::Csv(_), Some(d)) => d.clone(),
        (Scenario::Csv(_), None) => unreachable!("csv data is loaded before the grid runs"),
    }
}

fn run_one(cfg: &ExperimentConfig, fingerprint: &str, lambda: f64, seed: u64, loaded: Option<&Dataset>) -> RunRecord {
    let start = Instant::now();
    let outcome = (|| -> Result<FairRunResult> {
        let data = scenario_data(cfg, seed, loaded);
        let (train, test) = data.split(cfg.test_fraction, SeededRng::derive(seed, STREAM_SPLIT).next_seed());
        let train_cfg = cfg.train.to_config(cfg.mode, lambda, seed);
        let (model, mut result) = train_mode(&train, &train_cfg)?;
        result.final_metrics = Some(evaluate(&model, &test, cfg.train.loss, &cfg.eval, seed)?);
        Ok(result)
    })();
    let (status, error, result) = match outcome {
        Ok(r) => (RunStatus::Ok, None, r),
        Err(e) => (RunStatus::Failed, Some(e.to_string()), FairRunResult::default()),
    };
    RunRecord {
        lambda,
        seed,
        mode: cfg.mode,
        config_fingerprint: fingerprint.to_string(),
        version: VERSION.to_string(),
        runtime_seconds: start.elapsed().as_secs_f64(),
        status,
        error,
        result,
    }
}

/// Runs every `(λ, seed)` pair. A failing run is recorded and the others
/// continue; only data loading errors abort the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let loaded = match &cfg.scenario {
        Scenario::Csv(path) => {
            let schema = cfg.csv.as_ref().expect("validated");
            Some(ingest_csv(path, schema)?.data)
        }
        _ => None,
    };
    let fingerprint = cfg.fingerprint();
    let grid: Vec<(f64, u64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        grid.par_iter()
            .map(|&(lambda, seed)| run_one(cfg, &fingerprint, lambda, seed, loaded.as_ref()))
            .collect()
    });
    let aggregates = aggregate(&cfg.lambdas, &records);
    Ok(ExperimentReport {
        config: cfg.clone(),
        fingerprint,
        records,
        aggregates,
    })
}

/// Per-λ mean and sample standard deviation of each metric. Values are
/// rounded to the precision written to `runs.csv` first, so the aggregates
/// can be recomputed from that file.
pub fn aggregate(lambdas: &[f64], records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut seen: Vec<f64> = Vec::new();
    for &l in lambdas {
        if !seen.iter().any(|&s| s.to_bits() == l.to_bits()) {
            seen.push(l);
        }
    }
    seen.into_iter()
        .map(|lambda| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.lambda.to_bits() == lambda.to_bits()).collect();
            let ok: Vec<&FinalMetrics> = runs
                .iter()
                .filter(|r| r.status == RunStatus::Ok)
                .filter_map(|r| r.result.final_metrics.as_ref())
                .collect();
            let metrics = FinalMetrics::KEYS
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let values: Vec<f64> = ok
                        .iter()
                        .filter_map(|m| m.values()[k])
                        .map(|v| format_g6(v).parse::<f64>().expect("formatted float"))
                        .collect();
                    (name.to_string(), stat(&values))
                })
                .collect();
            AggregateRow {
                lambda,
                successes: ok.len(),
                failures: runs.len() - ok.len(),
                metrics,
            }
        })
        .collect()
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some(Stat { mean, std })
}
