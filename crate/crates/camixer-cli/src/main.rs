//! `camixer` command line: train, infer, mask-dump, flops, and eval for the
//! content-aware token mixing super-resolution network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use camixer::imaging::SyntheticKind;
use camixer::mixer::RouteMode;
use clap::{Parser, Subcommand, ValueEnum};

/// Exit codes: 2 for configuration errors, 3 for data errors, 4 for numeric
/// aborts.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Top-K windows by router preference.
    Topk,
    /// Every window the router prefers for attention.
    Threshold,
}

impl From<ModeArg> for RouteMode {
    fn from(m: ModeArg) -> RouteMode {
        match m {
            ModeArg::Topk => RouteMode::InferTopk,
            ModeArg::Threshold => RouteMode::InferThreshold,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Flat,
    Texture,
    HalfSplit,
}

impl From<KindArg> for SyntheticKind {
    fn from(k: KindArg) -> SyntheticKind {
        match k {
            KindArg::Flat => SyntheticKind::Flat,
            KindArg::Texture => SyntheticKind::Texture,
            KindArg::HalfSplit => SyntheticKind::HalfSplit,
        }
    }
}

#[derive(Parser)]
#[command(name = "camixer", version, about = "Content-aware token mixing super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config; writes CSV metrics and
    /// checkpoints under the run directory.
    Train {
        /// JSON run config (sections: model, train, data, routing, io).
        #[arg(long)]
        config: PathBuf,
        /// Override the run directory from the config's io section.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Upscale one PPM image with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Attention ratio (defaults to the checkpoint's training target).
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Topk)]
        mode: ModeArg,
        /// Process in square tiles of this side instead of whole-image.
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap in pixels (used with --tile).
        #[arg(long, default_value_t = 4)]
        overlap: usize,
    },
    /// Write per-block routing masks as PGM images (attention windows white).
    MaskDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated block ids (default: all blocks).
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Analytic complexity report (optionally reconciled against an
    /// instrumented forward pass).
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Attention ratio (defaults to the config's routing target).
        #[arg(long)]
        gamma: Option<f64>,
        /// Output (SR) resolution the report assumes.
        #[arg(long, default_value_t = 1280)]
        out_width: usize,
        #[arg(long, default_value_t = 720)]
        out_height: usize,
        /// Also run an instrumented forward and report measured MAdds.
        #[arg(long)]
        measure: bool,
    },
    /// PSNR/SSIM over paired image directories (matched by file name); with
    /// a checkpoint the LR side is upscaled first, otherwise the directories
    /// are compared directly.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lr_dir: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 4)]
        overlap: usize,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Topk)]
        mode: ModeArg,
        /// Latitude-weighted metric variants.
        #[arg(long)]
        ws: bool,
        /// Measure on the luma channel instead of RGB.
        #[arg(long)]
        luma: bool,
    },
    /// Generate a synthetic HR image (and optional bicubic LR counterpart)
    /// as PPM, for demos and smoke tests.
    Synth {
        #[arg(long, value_enum, default_value_t = KindArg::HalfSplit)]
        kind: KindArg,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        lr: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out_dir } => commands::cmd_train(&config, out_dir.as_deref()),
        Command::Infer { checkpoint, input, output, gamma, mode, tile, overlap } => {
            commands::cmd_infer(&checkpoint, &input, &output, gamma, mode.into(), tile, overlap)
        }
        Command::MaskDump { checkpoint, input, out_dir, blocks, gamma } => {
            commands::cmd_mask_dump(&checkpoint, &input, &out_dir, blocks, gamma)
        }
        Command::Flops { config, gamma, out_width, out_height, measure } => {
            commands::cmd_flops(&config, gamma, out_width, out_height, measure)
        }
        Command::Eval { checkpoint, lr_dir, hr_dir, tile, overlap, gamma, mode, ws, luma } => commands::cmd_eval(
            checkpoint.as_deref(),
            &lr_dir,
            &hr_dir,
            tile,
            overlap,
            gamma,
            mode.into(),
            ws,
            luma,
        ),
        Command::Synth { kind, size, scale, seed, hr, lr } => {
            commands::write_synthetic(kind.into(), size, scale, seed, &hr, lr.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            commands::flush_stdout();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
