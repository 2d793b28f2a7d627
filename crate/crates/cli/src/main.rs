mod commands;
mod logging;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ibit::model::Variant;
use ibit::IbitError;
use logging::{LogFormat, Logger};

#[derive(Parser, Debug)]
#[command(name = "ibit", version, about = "Learned-mask vision transformer workflows")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    pub log: LogFormat,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check convolution/attention equivalence and rolled-mask ranks.
    VerifyEquivalence(commands::VerifyArgs),
    /// Fit sub-masks to a Gaussian attention target.
    PretrainMask(commands::PretrainArgs),
    /// Train a model on IDX data.
    Train(commands::TrainArgs),
    /// Top-1 accuracy of a checkpoint.
    Eval(commands::EvalArgs),
    /// Attention rollout map for one image.
    Explain(commands::ExplainArgs),
    /// Heatmaps of one head's mask across saved epochs.
    Masks(commands::MasksArgs),
    /// Accuracy curves over data fractions and variants.
    BenchScaling(commands::BenchArgs),
    /// Write the synthetic shapes dataset as IDX files.
    ExportSynth(commands::ExportSynthArgs),
}

/// Failure of a subcommand, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Usage(String),
    /// Exit code 1.
    Failed(String),
}

impl From<IbitError> for CliError {
    fn from(e: IbitError) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn parse_variant(s: &str) -> CliResult<Variant> {
    s.parse().map_err(|e: IbitError| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if g.precision == Precision::F32 {
        return Err(CliError::Usage(
            "--precision f32 is not supported; all computation is 64-bit".into(),
        ));
    }
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("cannot start thread pool: {e}")))?;
    }
    let log = Logger::new(g.log);
    match cli.command {
        Command::VerifyEquivalence(a) => commands::verify_equivalence(a, g, &log),
        Command::PretrainMask(a) => commands::pretrain_mask(a, g, &log),
        Command::Train(a) => commands::train(a, g, &log),
        Command::Eval(a) => commands::eval(a, g, &log),
        Command::Explain(a) => commands::explain(a, g, &log),
        Command::Masks(a) => commands::masks(a, g, &log),
        Command::BenchScaling(a) => commands::bench_scaling(a, g, &log),
        Command::ExportSynth(a) => commands::export_synth(a, g, &log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Parses `"a,b,c"` with `FromStr`.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("bad {what} {p:?}"))))
        .collect()
}

pub fn require_dir(p: &PathBuf) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", p.display())))
}
