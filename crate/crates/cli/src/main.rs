//! `mobilex`: train, evaluate, predict, inspect, benchmark and Pareto analysis.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage, 3 configuration
//! (including checkpoints that do not match), 4 data, 5 numeric.

mod commands;
mod error;
mod pareto;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mobilex_core::model::Variant;

use error::Result;
use settings::Settings;

#[derive(Parser)]
#[command(name = "mobilex", version, about = "MobileXNet monocular depth estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and CSV logs to --out.
    Train(TrainArgs),
    /// Print one metrics CSV row for a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Write 16-bit depth PNGs for every manifest entry.
    Predict(PredictArgs),
    /// Per-layer parameter and MAC report.
    Inspect(InspectArgs),
    /// Single-frame forward latency on this host.
    Bench(BenchArgs),
    /// Non-dominated front of `label,error,time_ms` points.
    Pareto(ParetoArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Divides every layer width (for quick experiments).
    #[arg(long)]
    width_divisor: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Enables per-epoch validation and the best checkpoint.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Training checkpoint to resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Backbone weights to start from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Output folder.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// `l1`, `l2`, `berhu` or `hybrid`.
    #[arg(long)]
    loss: Option<String>,
    /// Validation depth cap in meters, or `none`.
    #[arg(long)]
    cap: Option<String>,
    /// Turn on online augmentation.
    #[arg(long)]
    augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Depth cap in meters (80 or 50 for KITTI, 70 or 80 for Make3D), or `none`.
    #[arg(long)]
    cap: Option<String>,
    /// `ground_truth` or `prediction`.
    #[arg(long)]
    rel_denominator: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// CSV file to append the row to.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    label: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output folder.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// CSV file for the per-layer rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Benchmark a trained model instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Label recorded with the timings.
    #[arg(long)]
    device: Option<String>,
    /// CSV file to append the result to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParetoArgs {
    /// CSV with `label,error,time_ms` columns.
    #[arg(long)]
    input: PathBuf,
    /// Front as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scatter plot.
    #[arg(long)]
    svg: Option<PathBuf>,
}

impl ModelArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        s.set("variant", self.variant);
        s.set("seed", self.seed);
        s.set("width_divisor", self.width_divisor);
        Ok(s)
    }
}

fn paths(s: &mut Settings, pairs: [(&str, &Option<PathBuf>); 2]) {
    for (key, p) in pairs {
        s.set(key, p.as_ref().map(|p| p.display()));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => {
            let mut s = a.model.settings()?;
            paths(&mut s, [("manifest", &a.manifest), ("val_manifest", &a.val_manifest)]);
            paths(&mut s, [("checkpoint", &a.checkpoint), ("pretrained", &a.pretrained)]);
            s.set("out", a.out.as_ref().map(|p| p.display()));
            s.set("epochs", a.epochs);
            s.set("batch_size", a.batch_size);
            s.set("lr0", a.lr0);
            s.set("loss", a.loss);
            s.set("cap", a.cap);
            s.set("augment", a.augment.then_some(true));
            commands::train(&s)
        }
        Command::Eval(a) => {
            let mut s = Settings::load(a.config.as_deref())?;
            paths(&mut s, [("checkpoint", &a.checkpoint), ("manifest", &a.manifest)]);
            s.set("out", a.out.as_ref().map(|p| p.display()));
            s.set("cap", a.cap);
            s.set("rel_denominator", a.rel_denominator);
            s.set("batch_size", a.batch_size);
            commands::eval(&s, &a.label)
        }
        Command::Predict(a) => {
            let mut s = Settings::load(a.config.as_deref())?;
            paths(&mut s, [("checkpoint", &a.checkpoint), ("manifest", &a.manifest)]);
            s.set("out", a.out.as_ref().map(|p| p.display()));
            commands::predict(&s)
        }
        Command::Inspect(a) => {
            let mut s = a.model.settings()?;
            s.set("height", a.height);
            s.set("width", a.width);
            s.set("out", a.out.as_ref().map(|p| p.display()));
            commands::inspect(&s)
        }
        Command::Bench(a) => {
            let mut s = a.model.settings()?;
            s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
            s.set("height", a.height);
            s.set("width", a.width);
            s.set("out", a.out.as_ref().map(|p| p.display()));
            let device = a.device.unwrap_or_else(commands::default_device);
            commands::bench(&s, a.iters, a.warmup, &device)
        }
        Command::Pareto(a) => commands::pareto(&a.input, a.out.as_deref(), a.svg.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
