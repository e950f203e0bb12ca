//! `pmstrnn`: dataset generation, training, generation, imitation, analysis
//! and gradient checking. Every command writes `manifest.toml` into its
//! output directory.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmstrnn::Error;

#[derive(Parser)]
#[command(name = "pmstrnn", version, about = "Predictive multiple spatio-temporal scales RNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render movement sequences, one PMV file per (script, subject).
    GenData(GenDataArgs),
    /// Train a network and write scheduled checkpoints.
    Train(TrainArgs),
    /// Roll a checkpoint out in open or closed loop.
    Generate(GenerateArgs),
    /// Stream a target sequence through a checkpoint.
    Imitate(ImitateArgs),
    /// Attractor census and PCA over checkpoints.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// `P1..P6` (one file per primitive), a builtin script name
    /// (`CONCAT_A`, `CONCAT_B`, `SWITCH_TEST`) or a segment list like `P1x4,P3x2`.
    #[arg(long, required = true)]
    pub script: Vec<String>,
    /// Number of subjects.
    #[arg(long, default_value_t = 1)]
    pub subjects: u32,
    /// Id of the first subject; use ids past the training subjects for unseen ones.
    #[arg(long, default_value_t = 0)]
    pub first_subject: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cycles per primitive for `Pa..Pb` scripts.
    #[arg(long, default_value_t = 4)]
    pub cycles: usize,
    /// Nominal period in frames before subject jitter.
    #[arg(long, default_value_t = 25)]
    pub period: usize,
    /// Frame size `HxW`.
    #[arg(long, default_value = "36x36")]
    pub size: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Network config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// PMV files or directories of them; directories are read in file-name order.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Training spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Epochs to checkpoint, e.g. `100,500,1000`; overrides the spec.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index of the training sequence whose initial state is used.
    #[arg(long, default_value_t = 0)]
    pub sequence_id: usize,
    #[arg(long, value_parser = ["open", "closed"])]
    pub mode: String,
    #[arg(long)]
    pub steps: usize,
    /// Sequence feeding the open loop; its first frame seeds the closed loop.
    #[arg(long)]
    pub data: PathBuf,
    /// Activity to record as CSV, `layer:fm|cm` (repeatable).
    #[arg(long)]
    pub record: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub lookahead: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ImitateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// `er`, `entrain` or `both`.
    #[arg(long, value_parser = ["er", "entrain", "both"])]
    pub mode: String,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Step size on the summed squared window error.
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    /// Early-exit window error; defaults to half the checkpoint's closed-loop error.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub lookahead: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Checkpoint files or directories of `*.pmn` files.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// Training sequences, in training order.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Run the attractor census.
    #[arg(long)]
    pub census: bool,
    /// PCA of recorded activity, `layer:fm|cm|out:n` (repeatable).
    #[arg(long)]
    pub pca: Vec<String>,
    /// Closed-loop steps per regeneration.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Network config (TOML); the toy network when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Entries sampled per parameter tensor.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Negative control: multiplies the analytic gradient of one class by 1.001.
    #[arg(long, hide = true)]
    pub corrupt_class: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status of a failed command.
pub enum Failure {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            Error::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Imitate(a) => commands::imitate(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
