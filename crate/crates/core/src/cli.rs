//! Command-line entry point: `run`, `metrics`, `analyze`, `replay` and
//! `validate`. Exit codes: 0 success, 1 usage error, 2 execution error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::analysis::{
    analyze_samples, read_samples_csv, write_pooled, HistogramConfig, PooledAnalysis,
};
use crate::fairness::{evaluate, Evaluation, MetricName};
use crate::harness::{replay_check, run_experiment, ExperimentConfig, RunOptions, RunStats};
use crate::tabular::{load_dataset, FeatureSchema, TabularInstance};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_FAILURE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "madfair",
    version,
    about = "Fairness evaluation of single-agent and multi-agent-debate classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment: single-agent baselines, debates, and the report.
    Run(RunArgs),
    /// Compute group fairness metrics for a predictions file.
    Metrics(MetricsArgs),
    /// Recompute the pooled percentile analysis of a finished run.
    Analyze(AnalyzeArgs),
    /// Re-derive outcomes (and optionally the report) from stored transcripts.
    Replay(ReplayArgs),
    /// Check a config file without running anything.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Continue an interrupted run in the same output directory.
    #[arg(long)]
    pub resume: bool,
    /// Forbid HTTP backends for this run.
    #[arg(long)]
    pub offline: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_concurrency: Option<u64>,
    /// Overrides the dataset split seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// CSV with columns `instance_id,prediction` (true/false).
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Feature schema JSON.
    #[arg(long)]
    pub schema: PathBuf,
    /// Where to write `metrics.csv`; nothing is written when omitted.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Output directory of a run (must contain `tables/samples.csv`).
    #[arg(long)]
    pub results: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A run's output directory or its `transcripts/` subdirectory.
    #[arg(long)]
    pub transcripts: PathBuf,
    /// When given, the report is rebuilt and compared byte-for-byte.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Harness(#[from] crate::harness::HarnessError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error(transparent)]
    Tabular(#[from] crate::tabular::TabularError),
    #[error(transparent)]
    Fairness(#[from] crate::fairness::FairnessError),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{flag}: no such file `{}`",
            path.display()
        )))
    }
}

fn require_dir(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{flag}: no such directory `{}`",
            path.display()
        )))
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn run_summary(stats: &RunStats) -> String {
    format!(
        "instances={} tasks={} run={} done={} errored={} pending={} consensus_rate={} excluded={} backend_calls={} cache_hits={}",
        stats.eval_instances,
        stats.tasks_total,
        stats.tasks_run,
        stats.done,
        stats.errored,
        stats.pending,
        stats.consensus_rate().map_or_else(|| "NA".into(), |r| format!("{r:.3}")),
        stats.excluded,
        stats.backend_calls,
        stats.cache_hits,
    )
}

pub fn cmd_run(args: &RunArgs) -> Result<String, CliError> {
    require_file("--config", &args.config)?;
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = &args.out_dir {
        config.run.out_dir = dir.clone();
    }
    if args.offline {
        config.run.offline = true;
    }
    if let Some(n) = args.max_concurrency {
        config.run.max_concurrency = n as usize;
    }
    if let Some(seed) = args.seed {
        config.dataset.seed = seed;
    }
    config.validate()?;
    let output = run_experiment(
        &config,
        &RunOptions {
            resume: args.resume,
            task_limit: None,
        },
    )?;
    let mut out = run_summary(&output.stats);
    out.push('\n');
    if output.report.is_some() {
        let _ = writeln!(
            out,
            "report written to {}",
            config.run.out_dir.join("report.md").display()
        );
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    instance_id: u64,
    prediction: String,
}

fn parse_prediction(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<u64, bool>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (line, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let value = parse_prediction(&row.prediction).ok_or_else(|| {
            CliError::Input(format!(
                "{}: row {}: prediction `{}` is not true/false",
                path.display(),
                line + 1,
                row.prediction
            ))
        })?;
        if out.insert(row.instance_id, value).is_some() {
            return Err(CliError::Input(format!(
                "{}: instance {} predicted twice",
                path.display(),
                row.instance_id
            )));
        }
    }
    if out.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no predictions",
            path.display()
        )));
    }
    Ok(out)
}

pub fn metrics_table(eval: &Evaluation, groups: &[String; 2]) -> String {
    let mut out = String::from("group\tn\tACC\tTPR\tPPV\tFPR\tF1\n");
    for (i, g) in groups.iter().enumerate() {
        let u = &eval.utilities[i];
        let _ = writeln!(
            out,
            "{g}\t{}\t{}\t{}\t{}\t{}\t{}",
            eval.confusion.counts[i].total(),
            fmt_metric(u.acc),
            fmt_metric(u.tpr),
            fmt_metric(u.ppv),
            fmt_metric(u.fpr),
            fmt_metric(u.f1),
        );
    }
    out.push_str("\nmetric\tvalue\n");
    for m in MetricName::ALL {
        let _ = writeln!(out, "{}\t{}", m.as_str(), fmt_metric(eval.deltas.get(m)));
    }
    out
}

fn metrics_csv(eval: &Evaluation, groups: &[String; 2]) -> String {
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let mut out = String::from("kind,name,acc,tpr,ppv,fpr,f1,value\n");
    for (i, g) in groups.iter().enumerate() {
        let u = &eval.utilities[i];
        let _ = writeln!(
            out,
            "group,{g},{},{},{},{},{},",
            na(u.acc),
            na(u.tpr),
            na(u.ppv),
            na(u.fpr),
            na(u.f1)
        );
    }
    for m in MetricName::ALL {
        let _ = writeln!(out, "delta,{},,,,,,{}", m.as_str(), na(eval.deltas.get(m)));
    }
    out
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<String, CliError> {
    require_file("--predictions", &args.predictions)?;
    require_file("--dataset", &args.dataset)?;
    require_file("--schema", &args.schema)?;
    let schema_text = std::fs::read_to_string(&args.schema)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.schema.display())))?;
    let schema: FeatureSchema = serde_json::from_str(&schema_text)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.schema.display())))?;
    let instances = load_dataset(&args.dataset, &schema)?;
    let predictions = read_predictions(&args.predictions)?;
    let by_id: BTreeMap<u64, &TabularInstance> = instances.iter().map(|i| (i.id, i)).collect();
    if let Some(id) = predictions.keys().find(|id| !by_id.contains_key(id)) {
        return Err(CliError::Input(format!(
            "prediction for unknown instance id {id}"
        )));
    }
    let eval: Vec<TabularInstance> = predictions.keys().map(|id| by_id[id].clone()).collect();
    let evaluation = evaluate(&predictions, &eval, &schema.group_values)?;
    if let Some(dir) = &args.out_dir {
        let path = dir.join("metrics.csv");
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        std::fs::write(&path, metrics_csv(&evaluation, &schema.group_values))
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    Ok(metrics_table(&evaluation, &schema.group_values))
}

#[derive(Deserialize)]
struct StoredSummary {
    #[serde(default)]
    histogram: Option<HistogramConfig>,
}

pub fn quantile_table(pooled: &PooledAnalysis) -> String {
    let mut out = String::from("metric\tmedian\tp95\tp99\tmax_med\tn\texcluded\n");
    for s in &pooled.summaries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.metric.as_str(),
            fmt_metric(s.median),
            fmt_metric(s.p95),
            fmt_metric(s.p99),
            s.max_med_ratio
                .map_or_else(|| "NA".into(), |r| format!("{r:.1}")),
            s.n_samples,
            s.n_excluded
        );
    }
    out
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String, CliError> {
    require_dir("--results", &args.results)?;
    let samples_path = args.results.join("tables").join("samples.csv");
    if !samples_path.is_file() {
        return Err(CliError::Input(format!(
            "missing {}",
            samples_path.display()
        )));
    }
    let samples = read_samples_csv(&samples_path)?;
    if samples.is_empty() {
        return Err(CliError::Input(format!(
            "{} holds no samples",
            samples_path.display()
        )));
    }
    // Keep the binning of the original run when it is known.
    let hist = std::fs::read(args.results.join("summary.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<StoredSummary>(&b).ok())
        .and_then(|s| s.histogram)
        .unwrap_or_default();
    let pooled = analyze_samples(&samples, hist)?;
    write_pooled(&pooled, &args.results)?;
    Ok(quantile_table(&pooled))
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<String, CliError> {
    require_dir("--transcripts", &args.transcripts)?;
    let config = match &args.config {
        Some(path) => {
            require_file("--config", path)?;
            Some(ExperimentConfig::load(path)?)
        }
        None => None,
    };
    let summary = replay_check(&args.transcripts, config.as_ref())?;
    Ok(format!(
        "replay ok: {} transcripts, {} messages, {} report files identical\n",
        summary.transcripts,
        summary.messages,
        summary.files_compared.len()
    ))
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<String, CliError> {
    require_file("--config", &args.config)?;
    let config = ExperimentConfig::load(&args.config)?;
    config.dataset.load_template()?;
    let instances = load_dataset(&config.dataset.path, &config.dataset.schema)?;
    let needed = config.dataset.few_shot_k + config.dataset.eval_count;
    if needed > instances.len() {
        return Err(CliError::Input(format!(
            "dataset has {} rows but the split needs {needed}",
            instances.len()
        )));
    }
    Ok(format!(
        "config ok: {} agents, {} systems, {} rows\n",
        config.agents.len(),
        config.systems.len(),
        instances.len()
    ))
}

pub fn dispatch(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Run(a) => cmd_run(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

/// Parses `args` (including the program name), runs the subcommand, prints
/// its output, and returns the exit code.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> ExitCode {
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .try_init();
    ExitCode::from(run_cli(std::env::args_os()))
}
