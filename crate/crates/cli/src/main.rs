mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hitdvae::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::CheckFailed(_) => "check_failed",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "hitdvae", version, about = "Stochastic 3D human motion generation with HiT-DVAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic motion corpus.
    Synth(SynthArgs),
    /// Fit the pose-prior flow on the training split.
    PretrainFlow(PretrainFlowArgs),
    /// Train the model.
    Train(TrainArgs),
    /// Roll out futures for clips of a corpus split.
    Generate(GenerateArgs),
    /// Score generations (or fresh rollouts of a checkpoint) on the test split.
    Eval(EvalArgs),
    /// Finite-difference check of the full training loss on a micro model.
    Gradcheck(GradcheckArgs),
    /// Draw clips as an SVG contact sheet.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Take the corpus section of this run config; its seed is replaced by `--seed`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Encoding::Base64)]
    pub encoding: Encoding,
}

#[derive(Args, Debug)]
pub struct PretrainFlowArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces `flow.seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pose prior written by `pretrain-flow`.
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Resume from a training checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub seed: u64,
    /// Observed frames; defaults to `schedule.observed`.
    #[arg(long)]
    pub obs_frames: Option<usize>,
    /// Samples per clip (K).
    #[arg(long)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Mode::Sample)]
    pub mode: Mode,
    /// Seed the latent history with posterior means.
    #[arg(long)]
    pub posterior_mean: bool,
    /// Attend to at most this many past frames.
    #[arg(long)]
    pub context_cap: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generated frames (G); defaults to the rest of each clip.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Restrict to these clip ids.
    #[arg(long = "clip")]
    pub clips: Vec<String>,
    #[command(flatten)]
    pub rollout: RolloutArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory written by `generate`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub generations: Option<PathBuf>,
    /// Generate from this checkpoint instead of reading `--generations`.
    #[arg(long, required_unless_present = "generations")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub obs_frames: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Sample)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Distance::PerFrame)]
    pub distance: Distance,
    /// Leave out accuracy and FID (no classifier is trained).
    #[arg(long)]
    pub skip_classifier: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Clip files, one colour each.
    #[arg(long = "clip", required = true)]
    pub clips: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated frame indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub frames: Vec<usize>,
    #[arg(long, value_enum, default_value_t = View::Front)]
    pub projection: View,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Encoding {
    Base64,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Sample,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Distance {
    PerFrame,
    Flattened,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum View {
    Front,
    Side,
    Top,
}

fn report(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("HITDVAE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("HITDVAE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::PretrainFlow(a) => commands::pretrain_flow(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Render(a) => commands::render(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}
