//! Command-line experiment harness.
//!
//! Every subcommand reads one JSON config file and writes its results into
//! an output directory, echoing the fully resolved config alongside them.
//! Exit codes: 0 success, 1 usage or config problem, 2 numerical failure,
//! 3 selftest verdict failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use amp_core::harness::{
    cmd_construct, cmd_run, cmd_se, cmd_selftest, cmd_sweep, load_config,
};
use amp_core::AmpError;

#[derive(Parser)]
#[command(name = "amp", version, about = "Approximate message passing experiment harness")]
struct Cli {
    /// Worker threads for trial-level parallelism (default: the AMP_THREADS
    /// environment variable, falling back to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct IoArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,

    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Asymptotic error trajectory and fixed point per measurement ratio.
    Se(IoArgs),
    /// Solver comparison on generated instances, with per-iteration records.
    Run(IoArgs),
    /// Solver comparison across measurement ratios, summary statistics only.
    Sweep(IoArgs),
    /// Tabulate matched loss and regularizer curves over smoothing levels.
    Construct(IoArgs),
    /// Built-in verification suites with a machine-readable verdict.
    Selftest(IoArgs),
}

fn configure_threads(flag: Option<usize>) -> Result<(), AmpError> {
    let from_env = match std::env::var("AMP_THREADS") {
        Ok(s) => Some(s.parse::<usize>().map_err(|_| {
            AmpError::Config(format!("AMP_THREADS must be a positive integer, got {s:?}"))
        })?),
        Err(_) => None,
    };
    let threads = flag.or(from_env);
    if let Some(n) = threads {
        if n == 0 {
            return Err(AmpError::Config("thread count must be at least 1".into()));
        }
        // Tests may run several commands in one process; only the first
        // builder wins, which is fine because they ask for the same count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), AmpError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Se(io) => cmd_se(&load_config(&io.config)?, &io.out),
        Command::Run(io) => cmd_run(&load_config(&io.config)?, &io.out),
        Command::Sweep(io) => cmd_sweep(&load_config(&io.config)?, &io.out),
        Command::Construct(io) => cmd_construct(&load_config(&io.config)?, &io.out),
        Command::Selftest(io) => {
            let report = cmd_selftest(&load_config(&io.config)?, &io.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .suites
                    .iter()
                    .filter(|s| !s.passed)
                    .map(|s| s.name)
                    .collect();
                Err(AmpError::SelftestFailed(failed.join(", ")))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outcomes; anything else is a
            // usage error and exits 1.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
