use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfcscore::dynamics::Mode;
use mfcscore_cli::commands::{cmd_compare, cmd_train, Status};
use mfcscore_cli::config::{ConfigError, RunConfig};
use mfcscore_cli::plots::plot_dir;

#[derive(Parser)]
#[command(
    name = "mfcscore",
    version,
    about = "Mean field control with score-based rollouts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Score,
    Fbsde,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run.
    Train(Common),
    /// Score against FBSDE over several seeds.
    Compare(Common),
    /// Write SVG figures for existing runs.
    Plot(Common),
}

fn load(c: &Common) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::from_path(&c.config)?;
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(s) = c.seeds {
        cfg.seeds = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = match m {
            ModeArg::Score => Mode::Score,
            ModeArg::Fbsde => Mode::Fbsde,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Train(c) => Ok(cmd_train(&load(&c)?)?.1),
        Command::Compare(c) => {
            let (report, status) = cmd_compare(&load(&c)?)?;
            print!("{}", report.to_csv());
            Ok(status)
        }
        Command::Plot(c) => {
            let cfg = load(&c)?;
            for f in plot_dir(&cfg.out)? {
                println!("{}", f.display());
            }
            Ok(Status::Completed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Completed) => ExitCode::SUCCESS,
        Ok(Status::Diverged) => ExitCode::from(3),
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("error: {c}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}
