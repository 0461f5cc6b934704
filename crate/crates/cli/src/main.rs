use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use netgp_cli::{cmd_evaluate, cmd_fit, cmd_simulate, cmd_verify, CliError};

#[derive(Parser)]
#[command(name = "netgp", version, about = "Network inference for coupled Gaussian-process time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plant a random network and simulate observations from it.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the variational posterior to an observations file.
    Fit {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fitted network against the truth; prints `auc=...`.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Where to write the ROC curve.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical stability audits and write a JSON report.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(config.as_deref(), &out),
        Command::Fit { observations, config, out } => cmd_fit(&observations, config.as_deref(), &out),
        Command::Evaluate { scores, truth, out } => {
            let auc = cmd_evaluate(&scores, &truth, &out)?;
            println!("auc={auc:.6}");
            Ok(())
        }
        Command::Verify { config, out } => {
            let report = cmd_verify(config.as_deref(), &out)?;
            println!("verify: {} checks passed", report.checks.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("netgp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
