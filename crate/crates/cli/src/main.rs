use std::path::PathBuf;
use std::process::ExitCode;

use ccmlab::sim::TrajectoryMode;
use ccmlab_cli::{cmd_eval, cmd_gen_dataset, cmd_run, cmd_train, CliError, Overrides, RunConfig, Which};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ccmlab", version, about = "Location-driven channel covariance estimation experiments")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trajectory mode for `run` (overrides the configuration)
    #[arg(long, global = true, value_parser = ["constant", "dynamic"])]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scene, grid channel cache and all datasets
    GenDataset,
    /// Train one network and write its checkpoint and loss trace
    Train {
        #[arg(long, value_enum)]
        which: Which,
        /// Continue from an existing checkpoint and optimizer state
        #[arg(long)]
        resume: bool,
    },
    /// Training-fraction sweep on the held-out sets
    Eval,
    /// Trajectory experiment over the SNR grid and location-noise sweep
    Run,
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mode = cli
        .mode
        .as_deref()
        .map(|m| m.parse::<TrajectoryMode>().map_err(|e| CliError::Config(e.to_string())))
        .transpose()?;
    let overrides = Overrides { seed: cli.seed, out_dir: cli.out, mode };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenDataset => cmd_gen_dataset(&cfg),
        Command::Train { which, resume } => cmd_train(&cfg, which, resume),
        Command::Eval => cmd_eval(&cfg),
        Command::Run => cmd_run(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
