mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mvcl_core::dataio::Split;
use mvcl_core::training::Profile;

use crate::config::Preset;

/// Multi-view contrastive pre-training and fine-tuning for time series.
#[derive(Parser, Debug)]
#[command(name = "mvcl", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed (`train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Default bundle the config starts from.
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Override any config field by its dotted name, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: mvcl_core::Error| e.to_string())
}

/// Where the data comes from; both map onto the `data` config section.
#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset directory (`data.dir`).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Generate a synthetic preset instead of reading files (`data.synthetic.preset`).
    #[arg(long, value_enum, conflicts_with = "data")]
    pub synthetic: Option<PresetArg>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum PresetArg {
    Xor,
    Shift,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Xor => Preset::Xor,
            PresetArg::Shift => Preset::Shift,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// View subset, e.g. `t,d,f` or `d,f` (`train.model.views`).
    #[arg(long)]
    pub views: Option<String>,
    /// Weight of the contrastive term (`train.lambda`).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Starting checkpoint, or `none` for random initialization.
    #[arg(long, value_name = "PATH|none")]
    pub checkpoint: Option<String>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Train only the classifier (`train.freeze_encoders`).
    #[arg(long)]
    pub freeze_encoders: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<String>,
    /// Split to score (`eval_split`).
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split '{s}' (expected train, val or test)"))
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub freeze_encoders: bool,
    /// Replace the view axis with all seven non-empty subsets.
    #[arg(long)]
    pub all_subsets: bool,
    /// Comma-separated seeds (`grid.seeds`).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// Corrupt the backward rule of an op (repeatable); `model_loss` corrupts the end-to-end check.
    #[arg(long = "inject-fault", value_name = "OP")]
    pub inject_fault: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long, value_enum, default_value = "xor")]
    pub preset: PresetArg,
    /// Full generator spec as JSON, instead of a preset.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractViewsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Sample indices to dump; all samples when omitted.
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct ConvertCsvArgs {
    /// CSV with columns `file,label,split`.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// The first column of each sample file holds timestamps.
    #[arg(long)]
    pub time_column: bool,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub freq_hz: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Contrastive pre-training on an unlabelled source dataset.
    Pretrain(TrainArgs),
    /// Supervised fine-tuning, from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Fine-tune over a grid of view subsets, fusion, λ and seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
    /// Write synthetic source and target datasets.
    GenSynth(GenSynthArgs),
    /// Dump the temporal, derivative and frequency views as CSV.
    ExtractViews(ExtractViewsArgs),
    /// Convert per-sample CSV files into a dataset directory.
    ConvertCsv(ConvertCsvArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(fail::VALIDATION),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
