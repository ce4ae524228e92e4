use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod train;

use config::UsageError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// EEG air-writing decoding: synthetic data, preprocessing, training and reports.
#[derive(Parser)]
#[command(name = "airscl", version)]
struct Cli {
    /// INI config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic continuous store.
    Synth(SynthArgs),
    /// Reference, filter, run ICA and epoch a continuous store.
    Preprocess(PreprocessArgs),
    /// Cross-validated training on an epoched store.
    Train(TrainArgs),
    /// Merge run reports into one table.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub trials_per_class: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub blink_rate: Option<f64>,
    #[arg(long)]
    pub emg_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lower band edge, Hz.
    #[arg(long)]
    pub low: Option<f64>,
    /// Upper band edge, Hz.
    #[arg(long)]
    pub high: Option<f64>,
    #[arg(long)]
    pub skip_ica: bool,
    #[arg(long)]
    pub ica_seed: Option<u64>,
    /// Confidence above which artifact components are removed.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ArchArg {
    Eegnet,
    Deepconvnet,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    Ce,
    Scl,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FeaturesArg {
    Eeg,
    Ica,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Epoched store, or a preprocess output holding one store per feature kind.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum)]
    pub features: Option<FeaturesArg>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel (subject, fold) units.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Only these subjects (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    /// Discard an existing run directory instead of resuming it.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Text,
    Json,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = config::Config::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Preprocess(a) => commands::preprocess(&cfg, a),
        Command::Train(a) => train::run(&cfg, a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
