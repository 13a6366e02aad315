//! Command-line front end. Data goes to stdout, diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 domain error (bad input data), 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{load_feature_table, DomainProfile, FeatureFormat};
use crate::harness::{
    self, best_per_group_with, load_results, persist_results, report_csv, GridSpec, GroupKey, SeedAggregate,
};
use crate::recommender::{load_reference_db, recommend_elr_with_extractor, Recommendation};
use crate::transport::{domain_similarity_with_flow, EmdSolution, SimilarityScore, DEFAULT_GAMMA};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "finetune", version, about = "Fine-tuning hyperparameter toolkit")]
pub struct Cli {
    /// Seed for every random draw not fixed by a config file.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Domain similarity between two feature files.
    Sim(SimArgs),
    /// Recommend an effective learning rate for a target domain.
    Recommend(RecommendArgs),
    /// Train the first cell of a config once.
    Train(TrainArgs),
    /// Run a full hyperparameter grid.
    Grid(GridArgs),
    /// Best validation error per hyperparameter group.
    Report(ReportArgs),
    /// Run the built-in invariant suites.
    Verify,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = FeatureFormat::Csv)]
    pub format: FeatureFormat,
    /// Write the optimal flow matrix as CSV.
    #[arg(long)]
    pub flow_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub source_model: String,
    #[arg(long, conflicts_with_all = ["source", "target"], required_unless_present_all = ["source", "target"])]
    pub sim: Option<f64>,
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FeatureFormat::Csv)]
    pub format: FeatureFormat,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Extractor that produced the feature files.
    #[arg(long)]
    pub extractor: Option<String>,
    /// Reference CSV replacing the built-in table.
    #[arg(long)]
    pub db: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source_config")]
pub struct ConfigSource {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk-default, paper-default or l2sp-protocol
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Append to the output instead of replacing it.
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub group: GroupKey,
    #[arg(long, value_enum, default_value_t = SeedAggregate::Min)]
    pub aggregate: SeedAggregate,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    init_logging(&cli.log_level);
    match run(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Sim(args) => cmd_sim(cli, args, out),
        Command::Recommend(args) => cmd_recommend(args, out),
        Command::Train(args) => cmd_train(cli, args, out),
        Command::Grid(args) => cmd_grid(cli, args, out),
        Command::Report(args) => cmd_report(cli, args, out),
        Command::Verify => cmd_verify(cli, out),
    }
}

fn load_profile(path: &Path, format: FeatureFormat, extractor: &str) -> Result<DomainProfile> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_feature_table(path, format)?.into_profile(&name, extractor)
}

fn similarity_of(
    source: &Path,
    target: &Path,
    format: FeatureFormat,
    gamma: f64,
) -> Result<(EmdSolution, SimilarityScore)> {
    let s = load_profile(source, format, "unknown")?;
    let t = load_profile(target, format, "unknown")?;
    domain_similarity_with_flow(&s, &t, gamma)
}

#[derive(Serialize)]
struct SimOutput {
    distance: f64,
    similarity: f64,
    gamma: f64,
}

fn cmd_sim(cli: &Cli, args: &SimArgs, out: &mut dyn Write) -> Result<i32> {
    let (solution, score) = similarity_of(&args.source, &args.target, args.format, args.gamma)?;
    if let Some(path) = &args.flow_out {
        let mut text = String::new();
        for row in &solution.flow {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    if cli.json {
        let doc = SimOutput {
            distance: score.distance,
            similarity: score.value,
            gamma: score.gamma,
        };
        writeln!(out, "{}", serde_json::to_string(&doc)?).map_err(io_out)?;
    } else {
        writeln!(out, "distance={:?} similarity={:?}", score.distance, score.value).map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct RecommendOutput {
    source_model: String,
    query_sim: f64,
    #[serde(flatten)]
    recommendation: Recommendation,
}

fn cmd_recommend(args: &RecommendArgs, out: &mut dyn Write) -> Result<i32> {
    let (query_sim, extractor) = match (args.sim, &args.source, &args.target) {
        (Some(sim), _, _) => (sim, args.extractor.clone()),
        (None, Some(s), Some(t)) => {
            let (_, score) = similarity_of(s, t, args.format, args.gamma)?;
            (
                score.value,
                Some(args.extractor.clone().unwrap_or_else(|| "unknown".into())),
            )
        }
        _ => return Err(Error::Input("give --sim or both --source and --target".into())),
    };
    let db = load_reference_db(args.db.as_deref())?;
    let recommendation = recommend_elr_with_extractor(&db, &args.source_model, query_sim, extractor.as_deref())?;
    let doc = RecommendOutput {
        source_model: args.source_model.clone(),
        query_sim,
        recommendation,
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?).map_err(io_out)?;
    Ok(EXIT_OK)
}

fn load_spec(source: &ConfigSource) -> Result<GridSpec> {
    match (&source.config, &source.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            GridSpec::from_json(&text)
        }
        (None, Some(name)) => harness::preset(name),
        (None, None) => Err(Error::Input("give --config or --preset".into())),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = load_spec(&args.source)?;
    let result = harness::run_single(&spec, cli.seed)?;
    if cli.json {
        writeln!(out, "{}", serde_json::to_string(&result)?).map_err(io_out)?;
    } else {
        writeln!(
            out,
            "eta={:?} momentum={:?} weight_decay={:?} elr={:?} final_val_error={:?} min_val_error={:?} diverged={}",
            result.hyperparams.eta,
            result.hyperparams.momentum,
            result.hyperparams.weight_decay,
            result.elr,
            result.final_val_error,
            result.min_val_error,
            result.diverged
        )
        .map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct GridSummary<'a> {
    trials: usize,
    diverged: usize,
    out: &'a Path,
}

fn cmd_grid(cli: &Cli, args: &GridArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = load_spec(&args.source)?;
    let results = harness::run_grid(&spec, args.jobs)?;
    persist_results(&results, &args.out, args.append)?;
    let summary = GridSummary {
        trials: results.len(),
        diverged: results.iter().filter(|r| r.diverged).count(),
        out: &args.out,
    };
    if cli.json {
        writeln!(out, "{}", serde_json::to_string(&summary)?).map_err(io_out)?;
    } else {
        writeln!(
            out,
            "trials={} diverged={} out={}",
            summary.trials,
            summary.diverged,
            args.out.display()
        )
        .map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_report(cli: &Cli, args: &ReportArgs, out: &mut dyn Write) -> Result<i32> {
    let results = load_results(&args.input)?;
    if results.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no results", args.input.display())));
    }
    let rows = best_per_group_with(&results, args.group, args.aggregate);
    if cli.json {
        for row in &rows {
            writeln!(out, "{}", serde_json::to_string(row)?).map_err(io_out)?;
        }
    } else {
        write!(out, "{}", report_csv(&rows)).map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_verify(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let outcomes = verify::run_all(cli.seed);
    for o in &outcomes {
        if cli.json {
            writeln!(out, "{}", serde_json::to_string(o)?).map_err(io_out)?;
        } else {
            let status = if o.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{status} {} ({})", o.suite, o.detail).map_err(io_out)?;
        }
    }
    Ok(if outcomes.iter().all(|o| o.passed) {
        EXIT_OK
    } else {
        EXIT_DOMAIN
    })
}
