//! `ecae`: evolve, fine-tune and evaluate convolutional autoencoders for image restoration.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Profile;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ECAE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "ecae-out";

#[derive(Parser, Debug)]
#[command(name = "ecae", version, about = "Evolutionary search over convolutional autoencoders")]
struct Cli {
    /// Output directory; overrides the config file and $ECAE_OUT_DIR.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the evolutionary search once per seed.
    Evolve(EvolveArgs),
    /// Retrain a genotype with the long schedule and score it on the test split.
    Finetune(FinetuneArgs),
    /// Score saved weights on a data split or an image directory.
    Eval(EvalArgs),
    /// Write corrupted copies of the images in a directory.
    Corrupt(CorruptArgs),
    /// Inspect architecture strings.
    #[command(subcommand)]
    Arch(ArchCommand),
    /// Compare analytic and finite-difference gradients of a network.
    Gradcheck(GradcheckArgs),
    /// Aggregate generation logs into CSV tables and a fitness plot.
    Report(ReportArgs),
    /// Print the fully resolved run configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Base preset that the config file is merged over.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[command(flatten)]
    pub overrides: EvoOverrides,
}

/// Command-line overrides of individual search settings.
#[derive(Args, Debug, Clone, Default)]
pub struct EvoOverrides {
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub children: Option<usize>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub level_back: Option<usize>,
    /// Training iterations per candidate.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// inpainting or denoising.
    #[arg(long)]
    pub mode: Option<ecae::arch::TaskMode>,
    /// none, center[:fraction], pixel[:p], half or gaussian:sigma.
    #[arg(long)]
    pub corruption: Option<ecae::data::CorruptionSpec>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub input_channels: Option<usize>,
    /// Children trained concurrently; 0 uses every core.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvolveArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated seeds; one independent run each.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Continue each seed from its checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop (after checkpointing) once this many generations are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Genotype file written by `evolve`.
    #[arg(long)]
    pub genotype: PathBuf,
    /// Total fine-tuning iterations.
    #[arg(long)]
    pub ft_iterations: Option<usize>,
    /// Comma-separated learning-rate milestones.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Weight file written by `evolve` or `finetune`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Evaluate every image in this directory instead of a configured split.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; defaults to eval/report.csv in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub corruption: ecae::data::CorruptionSpec,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct NetShape {
    #[arg(long, default_value = "inpainting")]
    pub mode: ecae::arch::TaskMode,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Side length of the square input.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Subcommand, Debug)]
pub enum ArchCommand {
    /// Validate and print the canonical form of an encoder string.
    Parse { arch: String },
    /// Print the full autoencoder layer list as TOML.
    Expand {
        arch: String,
        #[command(flatten)]
        shape: NetShape,
    },
    /// Print the activation shape after every layer.
    Shapes {
        arch: String,
        #[command(flatten)]
        shape: NetShape,
    },
    /// Print the number of trainable parameters.
    Params {
        arch: String,
        #[command(flatten)]
        shape: NetShape,
    },
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(default_value = "CS(4,3)-C(4,3)-CS(3,1)")]
    pub arch: String,
    #[arg(long, default_value = "inpainting")]
    pub mode: ecae::arch::TaskMode,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = ecae::nn::gradcheck::NETWORK_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also check each layer type on its own.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Generation logs (log.jsonl) of one or more runs.
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    /// Directory for the CSV tables and the plot.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 720)]
    pub plot_width: u32,
    #[arg(long, default_value_t = 420)]
    pub plot_height: u32,
}

/// A failure with a fixed kind tag and exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            code: 2,
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            code: 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Kind tag and exit code for an error: 2 for bad input, 1 for runtime failures.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return (e.kind, e.code);
        }
        if let Some(e) = cause.downcast_ref::<ecae::Error>() {
            let code = match e {
                ecae::Error::Config(_) | ecae::Error::Parse { .. } | ecae::Error::InvalidArchitecture(_) => 2,
                _ => 1,
            };
            return (e.kind(), code);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 1);
        }
    }
    ("runtime", 1)
}

fn report_error(kind: &str, message: &str) {
    let quoted = serde_json::to_string(message).expect("string serializes");
    eprintln!("error: kind={kind} message={quoted}");
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli.out_dir;
    match cli.command {
        Command::Evolve(a) => commands::evolve(&a, out),
        Command::Finetune(a) => commands::finetune(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Corrupt(a) => commands::corrupt(&a),
        Command::Arch(a) => commands::arch(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Report(a) => report::run(&a),
        Command::Config(a) => commands::show_config(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let text = e.to_string();
                    let first = text.lines().next().unwrap_or("invalid arguments");
                    report_error("usage", first.trim_start_matches("error: "));
                    ExitCode::from(2)
                }
            };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            report_error(kind, &format!("{err:#}"));
            ExitCode::from(code)
        }
    }
}
