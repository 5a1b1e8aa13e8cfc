//! `mvector`: command-line driver for the diarization pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bad arguments or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "mvector", version, about = "Speaker diarization backend with multilayer bootstrap networks")]
pub struct Cli {
    /// Worker threads for per-conversation work (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Master seed; falls back to the config file, then $MBN_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Train a PLDA model on labeled embeddings.
    TrainPlda(TrainPldaArgs),
    /// Map embeddings to PLDA latent variables.
    Extract(ExtractArgs),
    /// Train a network per recording and write its m-vectors.
    Mbn(MbnArgs),
    /// Cluster each recording and write hypothesis RTTM.
    Cluster(ClusterArgs),
    /// Score a hypothesis against a reference.
    Score(ScoreArgs),
    /// Pick the AHC threshold minimizing DER on a development set.
    Calibrate(CalibrateArgs),
    /// Write PCA coordinates for plotting.
    Project(ProjectArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Speakers in the training pool.
    #[arg(long, default_value_t = 50)]
    pub speakers: usize,
    /// Speakers per test conversation [default: min(5, speakers)].
    #[arg(long)]
    pub per_conversation: Option<usize>,
    /// Segments per speaker.
    #[arg(long, default_value_t = 20)]
    pub segs: usize,
    #[arg(long, default_value_t = 1)]
    pub conversations: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub between: f64,
    #[arg(long, default_value_t = 1.0)]
    pub within: f64,
    #[arg(long, default_value_t = 1.5)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.75)]
    pub shift: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainPldaArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Skip length normalization.
    #[arg(long)]
    pub no_length_norm: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub plda: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct MbnOpts {
    /// Clusterings per layer.
    #[arg(long = "v", default_value_t = 200)]
    pub ensemble_size: usize,
    #[arg(long, default_value_t = 50)]
    pub k1: usize,
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    /// Explicit top-layer floor, for imbalanced data.
    #[arg(long)]
    pub floor: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MbnArgs {
    #[arg(long)]
    pub plda: PathBuf,
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mbn: MbnOpts,
    /// Speaker counts for the top-layer floor.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub num_speakers: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityArg {
    /// PLDA log-likelihood ratio of latents.
    Plda,
    Cosine,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopArg {
    Oracle,
    Threshold,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Baseline,
    Mbn,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = SimilarityArg::Cosine)]
    pub similarity: SimilarityArg,
    /// Required for PLDA similarity.
    #[arg(long)]
    pub plda: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StopArg::Oracle)]
    pub stop: StopArg,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Reference RTTM supplying oracle speaker counts.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub num_speakers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct DerOpts {
    #[arg(long, default_value_t = 0.25)]
    pub collar: f64,
    /// Score overlapped reference speech too.
    #[arg(long)]
    pub no_skip_overlap: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub hypothesis: PathBuf,
    #[command(flatten)]
    pub der: DerOpts,
    /// Labeled embeddings or latents; adds the discriminant trace.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub plda: PathBuf,
    /// Development embeddings (not latents).
    #[arg(long)]
    pub dev: PathBuf,
    /// Reference RTTM; labeled dev segments are used otherwise.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Mbn)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub mbn: MbnOpts,
    #[command(flatten)]
    pub der: DerOpts,
    #[arg(long, default_value_t = -0.3, allow_negative_numbers = true)]
    pub grid_lo: f64,
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub grid_hi: f64,
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
    /// Also write the threshold here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    /// Only this recording.
    #[arg(long)]
    pub recording: Option<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub stop: Option<StopArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mvector::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Causes often repeat their source's text; print each once.
            let mut message = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !message.contains(&text) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&text);
                }
            }
            eprintln!("error: {message}");
            ExitCode::from(exit_code(&e))
        }
    }
}
