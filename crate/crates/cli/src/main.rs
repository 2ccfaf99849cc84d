mod commands;
mod raster;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tgdd::Error;

#[derive(Parser)]
#[command(name = "tgdd", version, about = "Trajectory-guided dataset distillation")]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train expert trajectories on a real dataset.
    Pretrain(PretrainArgs),
    /// Distill a synthetic set from a dataset and a trajectory store.
    Distill(DistillArgs),
    /// Train fresh networks on a synthetic (or real) set and test them.
    Eval(EvalArgs),
    /// Render a synthetic set as a PNG montage.
    ExportGrid(ExportGridArgs),
    /// Convert a directory of PNG images (one subdirectory per class) to a dataset file.
    Convert(ConvertArgs),
    /// Write the procedural toy dataset (train and test splits).
    Toygen(ToygenArgs),
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Train with random augmentation.
    #[arg(long)]
    pub augment: bool,
}

#[derive(Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub ipc: Option<usize>,
    /// Weight of the expert cross-entropy term (default depends on IPC).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Expert region length L.
    #[arg(long)]
    pub region: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Base learning rate, multiplied by IPC.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate used as-is instead of the IPC-scaled one.
    #[arg(long)]
    pub lr_override: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub rho: Option<usize>,
    /// Real images per class per iteration.
    #[arg(long)]
    pub real_batch: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// Feed the expert the decoded but unaugmented synthetic batch.
    #[arg(long)]
    pub plain_sdc: bool,
    /// Average the expert loss within classes and sum over classes.
    #[arg(long)]
    pub sdc_per_class: bool,
    /// Epoch-0 extractors and no expert term.
    #[arg(long)]
    pub dm_baseline: bool,
    /// Log every this many iterations.
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Synthetic set to evaluate.
    #[arg(long, conflicts_with = "real")]
    pub synthetic: Option<PathBuf>,
    /// Real training set to evaluate instead (whole-data reference).
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// Comma-separated depths to evaluate, e.g. `2,3,4`.
    #[arg(long)]
    pub arch_sweep: Option<String>,
    /// Results file the CSV rows are appended to (default `<out>/results.csv`).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportGridArgs {
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Directory holding one subdirectory of PNG files per class.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// 1 for grayscale, 3 for RGB.
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Args)]
pub struct ToygenArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Square image side.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Process exit status for each error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::LabelRange { .. } | Error::UnknownClass(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Truncated(_) | Error::Version { .. } | Error::EmptyDataset => 3,
        Error::Numeric(_) => 4,
        Error::Incompatible(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Context::new(cli.config.as_deref(), cli.seed, cli.out, cli.quiet);
    let result = ctx.and_then(|ctx| match cli.command {
        Command::Pretrain(a) => commands::pretrain(ctx, a),
        Command::Distill(a) => commands::distill(ctx, a),
        Command::Eval(a) => commands::eval(ctx, a),
        Command::ExportGrid(a) => commands::export_grid(ctx, a),
        Command::Convert(a) => commands::convert(ctx, a),
        Command::Toygen(a) => commands::toygen(ctx, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
