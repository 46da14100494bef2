use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use selanc_core::harness::{cmd_compare, cmd_directivity, cmd_robustness, cmd_run, CommandOptions, CommandReport, ExperimentSpec, Profile};
use selanc_core::AncError;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

/// Spatially selective ANC simulations.
#[derive(Debug, Parser)]
#[command(name = "anc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one controller on the configured scene.
    Run(Common),
    /// Sweep the noise direction and report per-band noise reduction.
    Directivity(Common),
    /// Sweep the sensor SNR for both regularization rules.
    Robustness(Common),
    /// Compare the proposed system with the hear-through baselines over input SNR.
    Compare(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment (or plain scene) JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "ANC_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Reseeds every source, replacing the experiment's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

type CommandFn = fn(&ExperimentSpec, &CommandOptions) -> Result<CommandReport, AncError>;

fn execute(command: Command) -> Result<CommandReport, AncError> {
    let (common, f): (Common, CommandFn) = match command {
        Command::Run(c) => (c, cmd_run),
        Command::Directivity(c) => (c, cmd_directivity),
        Command::Robustness(c) => (c, cmd_robustness),
        Command::Compare(c) => (c, cmd_compare),
    };
    let spec = ExperimentSpec::from_file(&common.config)?;
    let out_dir = common
        .out
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| AncError::Configuration("no output directory: pass --out or set ANC_OUT_DIR".into()))?;
    if common.jobs == Some(0) {
        return Err(AncError::Configuration("--jobs must be at least 1".into()));
    }
    let opts = CommandOptions { out_dir, profile: common.profile.into(), seed: common.seed, jobs: common.jobs };
    f(&spec, &opts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for file in &report.files {
                log::info!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(AncError::Diverged(r)) => {
            eprintln!("error: simulation diverged at sample {}: {}", r.sample, r.reason);
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
