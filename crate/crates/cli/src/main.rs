mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsfm::backbone::Branch;
use fsfm::masking::Strategy;

#[derive(Parser, Debug)]
#[command(name = "fsfm", version, about = "Face self-supervised pretraining toolkit")]
pub struct Cli {
    /// Overrides the config seed and FSFM_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the dual-branch model on a manifest.
    Pretrain(PretrainArgs),
    /// Finetune a classifier from a pretraining checkpoint.
    Finetune(FinetuneArgs),
    /// AUC and HTER of a JSON-lines score file.
    Evaluate(EvaluateArgs),
    /// Draw one mask and write it as JSON.
    MaskSample(MaskSampleArgs),
    /// Attention distance and head KL statistics of a checkpoint.
    AttnStats(AttnStatsArgs),
    /// Reconstruction panel for one image.
    Reconstruct(ReconstructArgs),
    /// Write a synthetic face set with parsing maps and a manifest.
    MakeFixtures(MakeFixturesArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many steps (a checkpoint is still written).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "finetune_out")]
    pub out: PathBuf,
    /// Scored after training; written to scores.jsonl.
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    Frame,
    Video,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_enum, default_value = "frame")]
    pub group_by: GroupBy,
    /// Fixed decision threshold; the equal-error threshold otherwise.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaskSampleArgs {
    #[arg(long, default_value = "crfr_p")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0.75)]
    pub ratio: f64,
    /// Image to mask; the built-in synthetic face when omitted.
    #[arg(long, requires = "parsing")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub parsing: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a mask overlay PNG.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Online,
    Target,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Online => Branch::Online,
            BranchArg::Target => Branch::Target,
        }
    }
}

#[derive(Args, Debug)]
pub struct AttnStatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "online")]
    pub branch: BranchArg,
    /// Use at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub parsing: PathBuf,
    #[arg(long, default_value = "crfr_p")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0.75)]
    pub ratio: f64,
    #[arg(long, default_value = "reconstruction.png")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MakeFixturesArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub labeled: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            eprintln!("{}", err.to_json());
            ExitCode::from(code)
        }
    }
}
