//! `idiorank`: classify compounds with LLMs, rank candidate images from
//! embedding stores, train projection heads and report metrics.
//!
//! Every artifact lives under `<runs-dir>/<run-id>/` next to a manifest
//! recording input hashes, parameters, version, seed and timestamp.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idiorank::ranker::ScoreMode;

use crate::config::RunConfig;
use crate::error::{Context, Result};
use crate::run::Run;

#[derive(Parser)]
#[command(
    name = "idiorank",
    version,
    about = "Rank images for potentially idiomatic nominal compounds"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run identifier; artifacts go to <runs-dir>/<run-id>/.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Parent directory of run directories [default: runs].
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute even when outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a TSV or JSON dataset into the run's dataset format.
    Ingest(IngestArgs),
    /// Classify each compound as idiomatic or literal by majority vote.
    Classify(ClassifyArgs),
    /// Generate idiomatic meanings and the query file for the encoder.
    Meanings(MeaningsArgs),
    /// Rank candidate images by cosine similarity.
    Rank(RankArgs),
    /// Average the scores of several rankings.
    Ensemble(EnsembleArgs),
    /// Build contrastive triplets for head training.
    BuildTriplets(TripletArgs),
    /// Train a projection head.
    TrainHead(TrainArgs),
    /// Train every point of the hyperparameter grid.
    Grid(GridArgs),
    /// Project a store through a trained head.
    Project(ProjectArgs),
    /// Score ranking files against gold orders.
    Eval(EvalArgs),
    /// Collect every ranking of the run into one report.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Dataset file: `.tsv` with the shared-task columns, or dataset JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Split name to write; not used with --split.
    #[arg(long)]
    pub name: Option<String>,
    /// Dataset language; required for TSV input.
    #[arg(long)]
    pub language: Option<String>,
    /// Split into train/val/test with the configured fractions and the root seed.
    #[arg(long)]
    pub split: bool,
    /// Names of the three parts written by --split.
    #[arg(long, value_delimiter = ',', default_value = "train,val,test")]
    pub split_names: Vec<String>,
}

#[derive(Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub llm: String,
    #[arg(long)]
    pub split: String,
    /// Votes per compound [default: config or 5].
    #[arg(long)]
    pub t: Option<usize>,
}

#[derive(Args)]
pub struct MeaningsArgs {
    #[arg(long)]
    pub llm: String,
    #[arg(long)]
    pub split: String,
    /// Use gold compound types instead of the classify output.
    #[arg(long)]
    pub gold_types: bool,
    /// Ask for a meaning for every compound, literal ones included.
    #[arg(long)]
    pub all: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Ci,
    Cic,
}

impl From<ModeArg> for ScoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ci => ScoreMode::Ci,
            ModeArg::Cic => ScoreMode::Cic,
        }
    }
}

#[derive(Args)]
pub struct RankArgs {
    /// Store name from the config, or a store made by `project`.
    #[arg(long)]
    pub store: String,
    #[arg(long)]
    pub split: String,
    /// Query variant; omit for the compound-only baseline.
    #[arg(long)]
    pub llm: Option<String>,
    #[arg(long, value_enum, default_value = "ci")]
    pub mode: ModeArg,
}

#[derive(Args)]
pub struct EnsembleArgs {
    /// Ranking files to combine.
    #[arg(long, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Alternatively, LLM names whose rankings for --store/--split/--mode are combined.
    #[arg(long, value_delimiter = ',')]
    pub llms: Vec<String>,
    #[arg(long)]
    pub store: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum, default_value = "ci")]
    pub mode: ModeArg,
    /// With --llms, use each LLM's projected store `<store>-f-<llm>`.
    #[arg(long)]
    pub fine_tuned: bool,
}

#[derive(Args, Clone, Default)]
pub struct HyperArgs {
    /// Hyperparameter preset: gpt-3.5, gpt-4 or gpt-4o [default: the LLM name].
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub k_soft: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "dropout")]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Redraw soft negatives every epoch.
    #[arg(long)]
    pub resample_per_epoch: bool,
    #[arg(long)]
    pub train_split: Option<String>,
    #[arg(long)]
    pub val_split: Option<String>,
    /// Split whose top-1 accuracy is tracked per epoch.
    #[arg(long)]
    pub test_split: Option<String>,
    /// Include caption similarity in the per-epoch accuracy.
    #[arg(long)]
    pub probe_captions: bool,
}

#[derive(Args)]
pub struct TripletArgs {
    #[arg(long)]
    pub store: String,
    #[arg(long)]
    pub llm: String,
    /// Split to build from [default: the training split].
    #[arg(long)]
    pub split: Option<String>,
    /// Soft negatives per modality [default: the training config].
    #[arg(long)]
    pub k_soft: Option<usize>,
    /// Drop modalities missing from the store instead of failing.
    #[arg(long)]
    pub lenient: bool,
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub store: String,
    #[arg(long)]
    pub llm: String,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args)]
pub struct GridArgs {
    #[arg(long)]
    pub store: String,
    #[arg(long)]
    pub llm: String,
    /// Concurrent trainings [default: available cores].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Drop modalities missing from the store instead of failing.
    #[arg(long)]
    pub lenient: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub store: String,
    #[arg(long)]
    pub llm: String,
    /// Checkpoint to apply [default: the one `train-head` wrote for --store/--llm].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Ranking files written by `rank` or `ensemble`.
    #[arg(long, num_args = 1.., required = true)]
    pub rank: Vec<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Report columns [default: config, else every split with rankings].
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
}

fn open_run(cli: &Cli) -> Result<Run> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let id = cli
        .run_id
        .clone()
        .or_else(|| config.run_id.clone())
        .unwrap_or_else(|| "default".into());
    run::check_name("run", &id)?;
    let runs_dir = cli
        .runs_dir
        .clone()
        .or_else(|| config.runs_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok(Run {
        root: std::path::absolute(runs_dir.join(&id)).context("resolving runs dir")?,
        id,
        seed: cli.seed.unwrap_or(config.seed),
        force: cli.force,
        config,
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let run = open_run(cli)?;
    match &cli.command {
        Command::Ingest(a) => commands::data::ingest(&run, a),
        Command::Classify(a) => commands::llm::classify(&run, a),
        Command::Meanings(a) => commands::llm::meanings(&run, a),
        Command::Rank(a) => commands::rank::rank(&run, a),
        Command::Ensemble(a) => commands::rank::ensemble(&run, a),
        Command::BuildTriplets(a) => commands::train::build_triplets(&run, a),
        Command::TrainHead(a) => commands::train::train_head(&run, a),
        Command::Grid(a) => commands::train::grid(&run, a),
        Command::Project(a) => commands::train::project(&run, a),
        Command::Eval(a) => commands::report::eval(&run, a),
        Command::Report(a) => commands::report::report(&run, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
