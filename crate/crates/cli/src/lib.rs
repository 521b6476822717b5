//! Commands behind the `florg` binary.
//!
//! Every command takes its inputs explicitly (the `FLORG_SEED` value is passed
//! in rather than read here) so the commands can be driven from tests.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use florg::federation::metrics::{format_float, write_diagnostics};
use florg::federation::{
    parse_config_str, run_experiment_with, Checkpoint, ExperimentConfig, MetricsWriter, RunOutcome,
};
use florg::verify::{run_all, PropertyOutcome, VerifyOptions};
use florg::{ConfigError, Execution, SchemeId};
use thiserror::Error;

pub const SEED_ENV: &str = "FLORG_SEED";

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SUMMARY_FILE: &str = "summary.csv";

pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const DIVERGED: u8 = 2;
    pub const VERIFY_FAILED: u8 = 3;
}

#[derive(Debug, Parser)]
#[command(
    name = "florg",
    version,
    about = "Federated low-rank fine-tuning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its metrics, diagnostics and checkpoint.
    Run(RunArgs),
    /// Run every (scheme, seed) pair and summarize per scheme.
    Compare(CompareArgs),
    /// Run the randomized property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
    /// Overrides FLORG_SEED and the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated, e.g. `florg,fedit`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub schemes: Vec<SchemeId>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Concurrent runs; all cores by default.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Fewer instances per property.
    #[arg(long)]
    pub quick: bool,
    /// Replay a previous run; a fresh seed is drawn otherwise.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Config { path: PathBuf, source: ConfigError },
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Output { path: PathBuf, message: String },
    #[error("{0}")]
    Sim(florg::Error),
    #[error("{count} of {total} runs diverged")]
    CellsDiverged { count: usize, total: usize },
    #[error("{failed} of {total} properties failed")]
    VerifyFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Sim(e) if e.is_divergence() => exit::DIVERGED,
            CliError::CellsDiverged { .. } => exit::DIVERGED,
            CliError::VerifyFailed { .. } => exit::VERIFY_FAILED,
            _ => exit::CONFIG,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Flag,
    Env,
    File,
    Default,
}

impl fmt::Display for SeedSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedSource::Flag => "flag",
            SeedSource::Env => "env",
            SeedSource::File => "file",
            SeedSource::Default => "default",
        })
    }
}

/// Read a config and resolve its seed: flag, then `FLORG_SEED`, then the
/// file, then the default.
pub fn load_config(
    path: &Path,
    seed_flag: Option<u64>,
    env_seed: Option<&str>,
) -> Result<(ExperimentConfig, SeedSource), CliError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut cfg = parse_config_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    let mut source = if sets_seed(&text) {
        SeedSource::File
    } else {
        SeedSource::Default
    };
    if let Some(raw) = env_seed {
        cfg.seed = raw.trim().parse().map_err(|_| {
            CliError::Usage(format!(
                "{SEED_ENV} must be an unsigned integer, got `{raw}`"
            ))
        })?;
        source = SeedSource::Env;
    }
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
        source = SeedSource::Flag;
    }
    Ok((cfg, source))
}

fn sets_seed(text: &str) -> bool {
    text.lines()
        .filter_map(|line| line.split('#').next()?.split_once('='))
        .any(|(key, _)| key.trim() == "seed")
}

/// Create `dir` and refuse to clobber any of `files` unless `overwrite`.
fn prepare_out(dir: &Path, files: &[&str], overwrite: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    if overwrite {
        return Ok(());
    }
    for f in files {
        let path = dir.join(f);
        if path.exists() {
            return Err(CliError::Usage(format!(
                "refusing to overwrite {}; pass --overwrite to replace it",
                path.display()
            )));
        }
    }
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Run and stream the per-round rows to `metrics_path`. Rows written before
/// a divergence are kept.
fn run_to_csv(cfg: &ExperimentConfig, metrics_path: &Path) -> Result<RunOutcome, CliError> {
    let file = File::create(metrics_path).map_err(io_at(metrics_path))?;
    let output = |e: florg::Error| CliError::Output {
        path: metrics_path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = MetricsWriter::new(BufWriter::new(file)).map_err(output)?;
    let mut write_failed = None;
    let result = run_experiment_with(cfg, Execution::default(), &mut |m| {
        writer
            .write(m)
            .inspect_err(|e| write_failed = Some(e.to_string()))
    });
    let flushed = writer
        .finish()
        .and_then(|mut w| w.flush().map_err(Into::into));
    if let Some(message) = write_failed {
        return Err(CliError::Output {
            path: metrics_path.to_path_buf(),
            message,
        });
    }
    flushed.map_err(output)?;
    result.map_err(CliError::Sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out: PathBuf,
    pub rounds: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seed: u64,
    pub seed_source: SeedSource,
}

pub fn cmd_run(args: &RunArgs, env_seed: Option<&str>) -> Result<RunReport, CliError> {
    let (cfg, seed_source) = load_config(&args.config, args.seed, env_seed)?;
    let files = [
        METRICS_FILE,
        DIAGNOSTICS_FILE,
        CHECKPOINT_FILE,
        MANIFEST_FILE,
    ];
    prepare_out(&args.out, &files, args.overwrite)?;
    let started = unix_now();
    let result = run_to_csv(&cfg, &args.out.join(METRICS_FILE));
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    let manifest = Manifest {
        args,
        cfg: &cfg,
        seed_source,
        started,
        status: &status,
    };
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    let outcome = result?;

    let diag_path = args.out.join(DIAGNOSTICS_FILE);
    let file = File::create(&diag_path).map_err(io_at(&diag_path))?;
    write_diagnostics(BufWriter::new(file), &outcome.diagnostics).map_err(|e| {
        CliError::Output {
            path: diag_path.clone(),
            message: e.to_string(),
        }
    })?;

    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    let file = File::create(&ckpt_path).map_err(io_at(&ckpt_path))?;
    let mut w = BufWriter::new(file);
    Checkpoint::from_state(&cfg, cfg.rounds as u64, &outcome.final_state)
        .write_to(&mut w)
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| CliError::Output {
            path: ckpt_path.clone(),
            message: e.to_string(),
        })?;

    Ok(RunReport {
        out: args.out.clone(),
        rounds: outcome.metrics.len(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome
            .metrics
            .last()
            .map_or(outcome.initial_loss, |m| m.global_loss),
        seed: cfg.seed,
        seed_source,
    })
}

struct Manifest<'a> {
    args: &'a RunArgs,
    cfg: &'a ExperimentConfig,
    seed_source: SeedSource,
    started: u64,
    status: &'a str,
}

impl Manifest<'_> {
    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = format!(
            "tool = florg {}\nconfig_path = {}\noutput_dir = {}\nseed_source = {}\nstarted_unix = {}\nfinished_unix = {}\nstatus = {}\n\n# resolved config\n{}",
            env!("CARGO_PKG_VERSION"),
            self.args.config.display(),
            self.args.out.display(),
            self.seed_source,
            self.started,
            unix_now(),
            self.status,
            self.cfg.to_text(),
        );
        fs::write(path, text).map_err(io_at(path))
    }
}

/// File name of one comparison cell.
pub fn cell_file(scheme: SchemeId, seed: u64) -> String {
    format!("{}_seed{seed}.csv", scheme.as_str())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub scheme: SchemeId,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub uplink_params: u64,
    pub downlink_params: u64,
    pub rounds_to_target: Option<usize>,
}

impl CellResult {
    pub fn diverged(&self) -> bool {
        self.final_loss.is_none()
    }
}

fn run_cell(
    base: &ExperimentConfig,
    scheme: SchemeId,
    seed: u64,
    out: &Path,
) -> Result<CellResult, CliError> {
    let cfg = ExperimentConfig {
        scheme,
        seed,
        ..base.clone()
    };
    match run_to_csv(&cfg, &out.join(cell_file(scheme, seed))) {
        Ok(outcome) => {
            let last = outcome.metrics.last();
            Ok(CellResult {
                scheme,
                seed,
                final_loss: Some(last.map_or(outcome.initial_loss, |m| m.global_loss)),
                final_accuracy: last.and_then(|m| m.eval_accuracy),
                uplink_params: outcome.metrics.iter().map(|m| m.uplink_params).sum(),
                downlink_params: outcome.metrics.iter().map(|m| m.downlink_params).sum(),
                rounds_to_target: outcome.rounds_to_target(cfg.target_ratio),
            })
        }
        Err(CliError::Sim(e)) if e.is_divergence() => Ok(CellResult {
            scheme,
            seed,
            final_loss: None,
            final_accuracy: None,
            uplink_params: 0,
            downlink_params: 0,
            rounds_to_target: None,
        }),
        Err(e) => Err(e),
    }
}

#[cfg(feature = "parallel")]
fn run_cells(
    base: &ExperimentConfig,
    cells: &[(SchemeId, u64)],
    out: &Path,
    workers: Option<usize>,
) -> Result<Vec<CellResult>, CliError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers:?} workers: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(s, seed)| run_cell(base, s, seed, out))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn run_cells(
    base: &ExperimentConfig,
    cells: &[(SchemeId, u64)],
    out: &Path,
    _workers: Option<usize>,
) -> Result<Vec<CellResult>, CliError> {
    cells
        .iter()
        .map(|&(s, seed)| run_cell(base, s, seed, out))
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "scheme",
    "runs",
    "diverged",
    "final_loss_mean",
    "final_loss_min",
    "final_loss_max",
    "final_accuracy_mean",
    "final_accuracy_min",
    "final_accuracy_max",
    "uplink_params",
    "downlink_params",
    "total_params",
    "rounds_to_target",
];

fn stats(values: &[f64]) -> [String; 3] {
    if values.is_empty() {
        return Default::default();
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [format_float(mean), format_float(min), format_float(max)]
}

/// One summary row per scheme. Traffic is the per-run total, averaged over
/// seeds; rounds-to-target is the seed mean, or `-` unless every run got
/// there.
pub fn summary_rows(results: &[CellResult], schemes: &[SchemeId]) -> Vec<[String; 13]> {
    schemes
        .iter()
        .map(|&scheme| {
            let runs: Vec<&CellResult> = results.iter().filter(|c| c.scheme == scheme).collect();
            let done: Vec<&CellResult> = runs.iter().copied().filter(|c| !c.diverged()).collect();
            let losses: Vec<f64> = done.iter().filter_map(|c| c.final_loss).collect();
            let accs: Vec<f64> = done.iter().filter_map(|c| c.final_accuracy).collect();
            let [loss_mean, loss_min, loss_max] = stats(&losses);
            let [acc_mean, acc_min, acc_max] = stats(&accs);
            let n = done.len().max(1) as u64;
            let up = done.iter().map(|c| c.uplink_params).sum::<u64>() / n;
            let down = done.iter().map(|c| c.downlink_params).sum::<u64>() / n;
            let reached: Vec<usize> = runs.iter().filter_map(|c| c.rounds_to_target).collect();
            let rounds = if !runs.is_empty() && reached.len() == runs.len() {
                let mean = reached.iter().sum::<usize>() as f64 / reached.len() as f64;
                format!("{mean}")
            } else {
                "-".to_string()
            };
            [
                scheme.as_str().to_string(),
                runs.len().to_string(),
                (runs.len() - done.len()).to_string(),
                loss_mean,
                loss_min,
                loss_max,
                acc_mean,
                acc_min,
                acc_max,
                up.to_string(),
                down.to_string(),
                (up + down).to_string(),
                rounds,
            ]
        })
        .collect()
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<CellResult>, CliError> {
    if args.schemes.is_empty() || args.seeds.is_empty() {
        return Err(CliError::Usage(
            "compare needs at least one scheme and one seed".into(),
        ));
    }
    if args.workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let (base, _) = load_config(&args.config, None, None)?;
    let cells: Vec<(SchemeId, u64)> = args
        .schemes
        .iter()
        .flat_map(|&s| args.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let mut files: Vec<String> = cells.iter().map(|&(s, seed)| cell_file(s, seed)).collect();
    files.push(SUMMARY_FILE.to_string());
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    prepare_out(&args.out, &names, args.overwrite)?;

    let results = run_cells(&base, &cells, &args.out, args.workers)?;

    let path = args.out.join(SUMMARY_FILE);
    let mut schemes = args.schemes.clone();
    schemes.dedup();
    write_summary(&path, &summary_rows(&results, &schemes)).map_err(|e| CliError::Output {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let count = results.iter().filter(|c| c.diverged()).count();
    if count > 0 {
        return Err(CliError::CellsDiverged {
            count,
            total: results.len(),
        });
    }
    Ok(results)
}

fn write_summary(path: &Path, rows: &[[String; 13]]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fresh_seed() -> u64 {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    florg::rng::mix(nanos as u64 ^ (nanos >> 64) as u64 ^ std::process::id() as u64)
}

/// Run the property suite, printing one line per property to `out`.
pub fn cmd_verify(
    args: &VerifyArgs,
    out: &mut dyn Write,
) -> Result<Vec<PropertyOutcome>, CliError> {
    let seed = args.seed.unwrap_or_else(fresh_seed);
    let stdout_err = |source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    };
    writeln!(
        out,
        "verify seed {seed}{}",
        if args.quick { " (quick)" } else { "" }
    )
    .map_err(stdout_err)?;
    let opts = VerifyOptions {
        seed,
        quick: args.quick,
        ..VerifyOptions::default()
    };
    let outcomes = run_all(&opts);
    for o in &outcomes {
        writeln!(
            out,
            "{} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        )
        .map_err(stdout_err)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::VerifyFailed {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(outcomes)
}

/// Run a parsed command line, writing progress to `out`.
pub fn dispatch(cli: &Cli, env_seed: Option<&str>, out: &mut dyn Write) -> Result<(), CliError> {
    let stdout_err = |source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    };
    match &cli.command {
        Command::Run(args) => {
            let r = cmd_run(args, env_seed)?;
            writeln!(
                out,
                "{} rounds, loss {} -> {} (seed {} from {}), wrote {}",
                r.rounds,
                format_float(r.initial_loss),
                format_float(r.final_loss),
                r.seed,
                r.seed_source,
                r.out.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Compare(args) => {
            let results = cmd_compare(args)?;
            writeln!(
                out,
                "{} runs, summary in {}",
                results.len(),
                args.out.join(SUMMARY_FILE).display()
            )
            .map_err(stdout_err)?;
        }
        Command::Verify(args) => {
            cmd_verify(args, out)?;
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run the command and return the exit
/// code. Help and version go to `out`, errors to `err`.
pub fn run_cli<I, T>(
    args: I,
    env_seed: Option<&str>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    exit::OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    exit::CONFIG
                }
            };
        }
    };
    match dispatch(&cli, env_seed, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "florg: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod command_tests;
