//! `asymgan` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error, 3 training
//! stopped on a non-finite value.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "asymgan", version = manifest::VERSION, about = "Asymmetric GAN for unpaired label/photo translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic label/photo dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate images with a trained model.
    Infer(InferArgs),
    /// Compare crop, scale or disturbance sensitivity of two models.
    Probe(ProbeArgs),
    /// Segmentation scores and sample diversity of a model.
    Eval(EvalArgs),
    /// Train the five extension-loss ablation groups.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Images in each unpaired training split.
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    /// Aligned validation pairs.
    #[arg(long, default_value_t = 32)]
    pub val: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

/// Training settings shared by `train` and `ablate`. Precedence, lowest
/// first: built-in defaults for the mode, `--config-file`, flags, `--set`.
#[derive(Args, Debug, Default, Serialize)]
pub struct ConfigArgs {
    /// `key=value` lines.
    #[arg(long)]
    pub config_file: Option<PathBuf>,
    /// baseline, asym or asym-ext.
    #[arg(long)]
    pub mode: Option<String>,
    /// concat-mid, concat-all or cin.
    #[arg(long)]
    pub z_inject: Option<String>,
    /// All nine loss weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub n_res_blocks: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub epochs_flat: Option<u64>,
    #[arg(long)]
    pub epochs_decay: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a checkpoint. Only `max_steps` and `checkpoint_every`
    /// may be changed.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Replace the results of an earlier run in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    /// `G(x)` for each input photo.
    Forward,
    /// `F(y, z)` for several prior samples per input label.
    Sample,
    /// `F(y, E(ref))` with the code of `--ref-image`.
    Encode,
    /// `F(y, z)` along a line between two sampled codes.
    Interpolate,
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "config", value_enum)]
    pub mode: InferMode,
    /// Input PNGs: photos for `forward`, label maps otherwise.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub ref_image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Codes drawn per input in `sample` mode.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Frames in `interpolate` mode.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKindArg {
    Crop,
    Scale,
    Disturb,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub asym: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ProbeKindArg,
    /// Noise amplitude for `disturb`.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Crop window; defaults to 125/128 of the image size.
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// Resize target; defaults to 130/128 of the image size.
    #[arg(long)]
    pub scale_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use only the first N validation pairs.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also write the probe image strips.
    #[arg(long)]
    pub images: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Codes drawn per label for the diversity score.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub proxy_epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub proxy_width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Bad arguments; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(asymgan::Error::NonFinite { .. }) = cause.downcast_ref::<asymgan::Error>() {
            return 3;
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ASYMGAN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("ASYMGAN_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
