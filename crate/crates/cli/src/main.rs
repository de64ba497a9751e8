use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgain_cli::{execute, Command, Overrides};

#[derive(Parser)]
#[command(name = "fedgain", version, about = "Event-triggered federated SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One seeded run: trace.log, summary.csv, objective.svg
    Run(Args),
    /// Replicated grid sweep: sweep.csv, sweep_runs.csv, matched.csv, tradeoff.svg
    Sweep(Args),
    /// Single-step oracle versus estimated gain: gain_compare.csv/.svg
    GainCompare(Args),
    /// Monte-Carlo bound checks: verify.txt, verify.csv
    Verify(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides experiment.output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides run.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides experiment.replications
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    no_plots: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Run(a) => (Command::Run, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::GainCompare(a) => (Command::GainCompare, a),
        Cmd::Verify(a) => (Command::Verify, a),
    };
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        replications: args.replications,
        no_plots: args.no_plots,
    };
    match execute(command, &args.config, &overrides) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fedgain: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
