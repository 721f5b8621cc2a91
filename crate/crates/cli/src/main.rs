use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod config;
mod error;
mod output;
mod svg;

use config::ExperimentConfig;
use error::Result;

/// Dual low-rank adapter experiments: verification suites, conflict
/// training, cue heatmaps, entropy analysis and latency benchmarks.
#[derive(Parser)]
#[command(name = "duallora", version)]
struct Cli {
    /// TOML config with one section per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $DUALLORA_OUT/<command>, else runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an invariant suite; exit 0 iff every check passes.
    Verify(cmd::verify::VerifyArgs),
    /// Latency of adapter variants relative to LoRA.
    Bench(cmd::bench::BenchArgs),
    /// Two-stage training of each adapter variant on conflicting tasks.
    TrainConflict(cmd::train::TrainConflictArgs),
    /// Fit the cue-enhancement module to a planted patch and export the heatmap.
    VceDemo(cmd::vce_demo::VceDemoArgs),
    /// Per-layer skill and rectified activation entropy of a Dual-LoRA checkpoint.
    Entropy(cmd::entropy::EntropyArgs),
}

fn out_dir(cli_out: Option<PathBuf>, command: &str) -> PathBuf {
    cli_out.unwrap_or_else(|| match std::env::var_os("DUALLORA_OUT") {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    })
}

fn run(cli: Cli) -> Result<()> {
    let file = ExperimentConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Verify(a) => cmd::verify::run(file.verify, a, &out_dir(cli.out, "verify")),
        Command::Bench(a) => cmd::bench::run(file.bench, a, &out_dir(cli.out, "bench")),
        Command::TrainConflict(a) => cmd::train::run(file.train_conflict, a, &out_dir(cli.out, "train-conflict")),
        Command::VceDemo(a) => cmd::vce_demo::run(file.vce_demo, a, &out_dir(cli.out, "vce-demo")),
        Command::Entropy(a) => cmd::entropy::run(file.entropy, a, &out_dir(cli.out, "entropy")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
