use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use renyi::harness::{emit_reports, parse_config, read_columns, run_experiment};
use renyi::metrics::{self, Estimator, HgrNnConfig, DEFAULT_KDE_BINS, DEFAULT_RDC_K, DEFAULT_RDC_S};
use renyi::synthetic::{oracle_mc_simplified_hgr, oracle_simplified_hgr_bounds};
use renyi::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN: u8 = 2;

#[derive(Parser)]
#[command(name = "renyi", version, about = "Maximal-correlation estimation and HGR-fair training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the λ × seed grid of an experiment config and write reports.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Estimate the dependence between two column groups of a CSV file.
    Estimate {
        csv: PathBuf,
        /// Comma-separated column names.
        #[arg(long)]
        u: String,
        #[arg(long)]
        v: String,
        /// nn, kde, rdc, mine or pearson.
        #[arg(long, default_value = "nn")]
        estimator: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form oracles.
    #[command(subcommand)]
    Oracle(Oracle),
}

#[derive(Subcommand)]
enum Oracle {
    /// Bounds and Monte-Carlo value of ρ(E(Y|X), Y) in the arctan scenario.
    Arctan {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Csv { .. } | Error::Io { .. }
    )
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUN })
}

fn columns(list: &str) -> Vec<String> {
    list.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
}

fn run(config: PathBuf, out: Option<PathBuf>, seed_override: Option<u64>) -> ExitCode {
    let mut cfg = match parse_config(&config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    let Some(dir) = out.or_else(|| cfg.output_dir.clone()) else {
        return fail(Error::Config("no output directory: pass --out or set output_dir".into()));
    };
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Err(e) = emit_reports(&report, &dir) {
        return fail(e);
    }
    for row in &report.aggregates {
        let cells: Vec<String> = row
            .metrics
            .iter()
            .filter_map(|(k, s)| s.map(|s| format!("{k}={:.4}±{:.4}", s.mean, s.std.unwrap_or(f64::NAN))))
            .collect();
        println!("lambda={} ok={}/{} {}", row.lambda, row.successes, row.successes + row.failures, cells.join(" "));
    }
    println!("reports written to {}", dir.display());
    if report.failures() > 0 {
        eprintln!("{} run(s) failed", report.failures());
        return ExitCode::from(EXIT_RUN);
    }
    ExitCode::SUCCESS
}

fn estimate(csv: PathBuf, u: String, v: String, estimator: String, seed: u64) -> ExitCode {
    let estimator: Estimator = match estimator.parse() {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    let (u_cols, v_cols) = (columns(&u), columns(&v));
    if u_cols.is_empty() || v_cols.is_empty() {
        return fail(Error::InvalidArgument("--u and --v need at least one column".into()));
    }
    let mut all = u_cols.clone();
    all.extend(v_cols.iter().cloned());
    let (m, dropped) = match read_columns(&csv, &all) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let uu = m.slice(ndarray::s![.., ..u_cols.len()]);
    let vv = m.slice(ndarray::s![.., u_cols.len()..]);
    let one_col = |name: &str| -> Result<(), Error> {
        if uu.ncols() == 1 && vv.ncols() == 1 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{name} needs exactly one --u and one --v column")))
        }
    };
    let nn_cfg = HgrNnConfig {
        batch_size: HgrNnConfig::default().batch_size.min(m.nrows().max(2)),
        ..HgrNnConfig::default().with_seed(seed)
    };
    let report = match estimator {
        Estimator::Nn => metrics::hgr_nn(uu, vv, &nn_cfg),
        Estimator::MineMi => metrics::mine_mi(uu, vv, &nn_cfg),
        Estimator::Rdc => metrics::hgr_rdc(uu, vv, DEFAULT_RDC_K, DEFAULT_RDC_S, seed),
        Estimator::Kde => one_col("kde").and_then(|_| metrics::hgr_kde(uu.column(0), vv.column(0), DEFAULT_KDE_BINS)),
        Estimator::PearsonAbs => one_col("pearson").and_then(|_| {
            metrics::pearson(uu.column(0), vv.column(0)).map(|r| metrics::HgrReport {
                estimate: r.abs(),
                estimator: Estimator::PearsonAbs,
                n: uu.nrows(),
                config_fingerprint: String::new(),
                flags: vec![],
            })
        }),
    };
    match report {
        Ok(r) => {
            if dropped > 0 {
                eprintln!("dropped {dropped} row(s) with blank cells");
            }
            println!("{}", serde_json::to_string_pretty(&r).expect("serializable report"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn oracle_arctan(alpha: f64, n_mc: usize, seed: u64) -> ExitCode {
    let (lower, upper) = oracle_simplified_hgr_bounds(alpha);
    match oracle_mc_simplified_hgr(alpha, n_mc, seed) {
        Ok(mc) => {
            println!("alpha={alpha} lower={lower:.6} upper={upper:.6} monte_carlo={mc:.6} (n_mc={n_mc})");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => run(config, out, seed_override),
        Command::Estimate {
            csv,
            u,
            v,
            estimator,
            seed,
        } => estimate(csv, u, v, estimator, seed),
        Command::Oracle(Oracle::Arctan { alpha, n_mc, seed }) => oracle_arctan(alpha, n_mc, seed),
    }
}
