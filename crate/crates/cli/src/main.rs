//! `qfair`: runs the fairness-estimation protocols from a TOML config.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use qfair::data::ProtocolKind;
use qfair::ingest::{load_dataset, write_prepared, DatasetSchema, DatasetSummary};
use qfair::protocol::{run_decoupling, run_protocol, summarize_decoupling, Estimator, ProtocolOutcome};
use qfair::quantify::Method;
use qfair::Error;
use thiserror::Error as ThisError;

use config::{Loaded, Scale};

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Classifies a library error raised while running a protocol.
    fn from_run(err: Error) -> Self {
        match err {
            Error::InvalidProtocol(_) | Error::InvalidSpec(_) | Error::NotApplicable(_) => {
                CliError::Config(err.to_string())
            }
            Error::SingleClass(_)
            | Error::EmptySample
            | Error::EmptyGroup(_)
            | Error::CellTooSmall { .. }
            | Error::EmptyPool { .. }
            | Error::NonFiniteValue { .. }
            | Error::MissingLabels(_) => CliError::Data(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qfair", version, about = "Estimate demographic disparity from unlabelled sensitive attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Preprocess a raw CSV with a schema and write the encoded dataset.
    Prepare(PrepareArgs),
    /// Run the configured protocols and write error records and summaries.
    Run(RunArgs),
    /// Recompute summaries from the records of an earlier run.
    Report(ReportArgs),
    /// Measure classification and quantification quality of the branch quantifiers.
    Decouple(RunArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Dataset schema (TOML).
    #[arg(long)]
    schema: PathBuf,
    /// Raw CSV; looked up under $QF_DATA_DIR when the path does not exist.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value = "prepared")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the base seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// 2 splits x 6 permutations x 3 repeats.
    #[arg(long, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// 5 splits x 6 permutations x 10 repeats.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding `records.jsonl`.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the summaries; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Prepare(args) => prepare(&args),
        Command::Run(args) => run(&args),
        Command::Report(args) => report(&args),
        Command::Decouple(args) => decouple(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let schema = DatasetSchema::from_path(&args.schema).map_err(|e| CliError::Config(e.to_string()))?;
    let csv = config::data_path(&args.csv)?;
    let file = std::fs::File::open(&csv).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    let loaded = load_dataset(&schema, file).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    let summary = DatasetSummary::of(&schema.name, &loaded.sample).map_err(|e| CliError::Data(e.to_string()))?;
    output::create_dir(&args.out)?;
    let names = loaded.preprocessor.feature_names();
    let prepared = args.out.join(format!("{}.prepared.csv", schema.name));
    let w = output::create(&prepared)?;
    write_prepared(&loaded.sample, &names, w).map_err(|e| CliError::Runtime(e.to_string()))?;
    output::write_json(
        &args.out.join(format!("{}.summary.json", schema.name)),
        &serde_json::json!({ "summary": summary, "load": loaded.report }),
    )?;
    info!(
        "{}: {} rows, {} features, Pr(S=1) {:.3}, Pr(Y=1) {:.3}",
        summary.name, summary.rows, summary.features, summary.pr_sensitive, summary.pr_target
    );
    Ok(())
}

struct Session {
    loaded: Loaded,
    out: PathBuf,
    scale: Option<Scale>,
    pool: rayon::ThreadPool,
}

fn session(args: &RunArgs) -> Result<Session, CliError> {
    let mut loaded = Loaded::read(&args.config)?;
    if let Some(seed) = args.seed {
        loaded.config.seed = seed;
    }
    let jobs = args.jobs.or(loaded.config.jobs);
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let scale = match (args.desk_scale, args.paper_scale) {
        (true, _) => Some(Scale::Desk),
        (_, true) => Some(Scale::Paper),
        _ => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let out = loaded.out_dir(args.out.as_deref());
    Ok(Session { loaded, out, scale, pool })
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let s = session(args)?;
    let data = s.loaded.load_data()?;
    let config = s.loaded.pipeline();
    let mut all = ProtocolOutcome::default();
    let mut expected = 0;
    for &kind in &s.loaded.config.protocol.protocols {
        let spec = s.loaded.spec(kind, s.scale);
        info!("{kind}: {} splits x {} repeats", spec.n_splits, spec.n_repeats);
        let outcome = s
            .pool
            .install(|| run_protocol(&data, &spec, &config))
            .map_err(CliError::from_run)?;
        let lost = outcome.failures.len();
        if lost > 0 {
            warn!("{kind}: {lost} work items failed; see failures.jsonl");
        }
        let n = config.estimators.len();
        expected += ProtocolOutcome::expected_records(&spec, grid_len(&outcome), n);
        all.records.extend(outcome.records);
        all.failures.extend(outcome.failures);
    }
    if all.records.is_empty() {
        return Err(CliError::Runtime("no records were produced".into()));
    }
    output::create_dir(&s.out)?;
    output::write_records(&s.out, &all.records)?;
    output::write_jsonl(&s.out.join("failures.jsonl"), &all.failures)?;
    output::write_summaries(&s.out, &all.records)?;
    output::write_json(
        &s.out.join("run.json"),
        &serde_json::json!({
            "dataset": s.loaded.dataset_name(),
            "seed": s.loaded.config.seed,
            "estimators": config.estimators,
            "records": all.records.len(),
            "failures": all.failures.len(),
            "expected_records": expected,
        }),
    )?;
    info!("wrote {} records to {}", all.records.len(), s.out.display());
    Ok(())
}

/// Number of distinct grid points seen in records or failures.
fn grid_len(outcome: &ProtocolOutcome) -> usize {
    let mut params: Vec<u64> = outcome.records.iter().map(|r| r.parameter.to_bits()).collect();
    params.extend(outcome.failures.iter().filter_map(|f| f.parameter.map(f64::to_bits)));
    params.sort_unstable();
    params.dedup();
    params.len()
}

fn report(args: &ReportArgs) -> Result<(), CliError> {
    let records = output::read_records(&args.input.join("records.jsonl"))?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", args.input.display())));
    }
    let out = args.out.as_deref().unwrap_or(&args.input);
    output::create_dir(out)?;
    output::write_summaries(out, &records)?;
    info!("summarized {} records into {}", records.len(), out.display());
    Ok(())
}

fn decouple(args: &RunArgs) -> Result<(), CliError> {
    let s = session(args)?;
    let methods = decoupling_methods(&s.loaded.config.pipeline.methods)?;
    for kind in &s.loaded.config.protocol.protocols {
        if !matches!(
            kind,
            ProtocolKind::SamplePrevD2Neg
                | ProtocolKind::SamplePrevD2Pos
                | ProtocolKind::SamplePrevD3Neg
                | ProtocolKind::SamplePrevD3Pos
        ) {
            return Err(CliError::Config(format!("decouple supports the prevalence-shift protocols only, not {kind}")));
        }
    }
    let data = s.loaded.load_data()?;
    let config = s.loaded.pipeline();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &kind in &s.loaded.config.protocol.protocols {
        let spec = s.loaded.spec(kind, s.scale);
        let outcome = s
            .pool
            .install(|| run_decoupling(&data, &spec, &methods, &config))
            .map_err(CliError::from_run)?;
        records.extend(outcome.records);
        failures.extend(outcome.failures);
    }
    if records.is_empty() {
        return Err(CliError::Runtime("no decoupling records were produced".into()));
    }
    output::create_dir(&s.out)?;
    output::write_csv(&s.out.join("decoupling.csv"), &records)?;
    output::write_csv(&s.out.join("decoupling_summary.csv"), &summarize_decoupling(&records))?;
    output::write_jsonl(&s.out.join("failures.jsonl"), &failures)?;
    info!("wrote {} decoupling records to {}", records.len(), s.out.display());
    Ok(())
}

fn decoupling_methods(estimators: &[Estimator]) -> Result<Vec<Method>, CliError> {
    estimators
        .iter()
        .map(|e| match e {
            Estimator::Quantifier { method, split: true }
                if qfair::protocol::DECOUPLING_METHODS.contains(method) =>
            {
                Ok(*method)
            }
            other => Err(CliError::Config(format!(
                "decouple needs methods with individual-level labels (CC, PACC, SLD), got {other}"
            ))),
        })
        .collect()
}
