//! `faimreg` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Results go to
//! stdout, diagnostics to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "faimreg", version, about = "Unsupervised deformable 3D registration")]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a network or per-pair direct fields on a dataset.
    Train(TrainArgs),
    /// Register one source volume to one target volume.
    Register(RegisterArgs),
    /// Evaluate Dice and folding over all ordered pairs of a dataset.
    Evaluate(EvaluateArgs),
    /// Export the Jacobian determinant map and folding mask of a field.
    Jmap(JmapArgs),
    /// Run finite-difference gradient checks in 64-bit mode.
    Gradcheck(GradcheckArgs),
    /// Print the network's layer table and parameter count.
    Describe(DescribeArgs),
    /// Train once per beta and tabulate Dice and folding.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of subjects.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// `N` for a cube, or `NXxNYxNZ`; every extent divisible by 4.
    #[arg(long, default_value = "16")]
    dims: String,
    /// Number of nonzero labels.
    #[arg(long, default_value_t = 4)]
    labels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `global`, `local` or `localN`.
    #[arg(long)]
    cc: Option<String>,
    /// Center-crop target, `N` or `NXxNYxNZ`.
    #[arg(long)]
    crop: Option<String>,
    /// Clip gradients to this global norm.
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest or directory containing one.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped: PathBuf,
    /// Subject ids selecting a per-pair field of a direct model.
    #[arg(long, requires = "target_id")]
    source_id: Option<String>,
    #[arg(long, requires = "source_id")]
    target_id: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    report: PathBuf,
    /// Optional per-label Dice CSV path.
    #[arg(long)]
    per_label: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Only used for the reported loss columns.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long, default_value = "local")]
    cc: String,
}

#[derive(Args, Debug)]
struct JmapArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out_det: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spatial extent of per-op inputs (3 to 8).
    #[arg(long, default_value_t = 5)]
    size: usize,
    /// Overrides both the per-op and end-to-end tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Network parameter entries sampled per tensor.
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Args, Debug)]
#[group(multiple = false)]
struct DescribeArgs {
    /// key=value network config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input extent for the layer table when describing a config.
    #[arg(long, default_value = "144x180x144")]
    dims: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated beta values.
    #[arg(long, default_value = "0,1e-5,1e-4,1e-3,1e-2")]
    betas: String,
    /// Sweep CSV path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code())
        }
    }
}
