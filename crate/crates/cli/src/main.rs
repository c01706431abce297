use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use energyecon::exchange::ConsumptionMode;
use energyecon::runner::{self, Command, OutputFormat, RunOptions, EXIT_CHECKS_FAILED};

#[derive(Parser, Debug)]
#[command(name = "energyecon", version, about = "Energy-transfer economy solver")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve each scenario's autarkic equilibrium; writes solution.json,
    /// prices.csv and decomposition.csv.
    SolveAutarky(Args),
    /// Trade between two or more solved scenarios; writes exchange.json,
    /// exchange.csv and metc.csv.
    SolveExchange(Args),
    /// Price table and proportionality fit; writes report.json and CSVs.
    PriceReport(Args),
    /// Run the invariant suite; writes verify.json and verify.csv.
    Verify(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Scenario files (JSON).
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Write only the CSV tables or only the structured document.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Seed for randomized checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Consumption response to post-trade transfers.
    #[arg(long, value_enum, default_value_t = Mode::FixedConsumption)]
    mode: Mode,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Csv,
    Structured,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    FixedConsumption,
    #[value(name = "re-solve")]
    ReSolve,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::SolveAutarky(a) => (Command::SolveAutarky, a),
        Cmd::SolveExchange(a) => (Command::SolveExchange, a),
        Cmd::PriceReport(a) => (Command::PriceReport, a),
        Cmd::Verify(a) => (Command::Verify, a),
    };
    let opts = RunOptions {
        out_dir: args.out,
        format: args.format.map(|f| match f {
            Format::Csv => OutputFormat::Csv,
            Format::Structured => OutputFormat::Structured,
        }),
        seed: args.seed,
        mode: match args.mode {
            Mode::FixedConsumption => ConsumptionMode::FixedConsumption,
            Mode::ReSolve => ConsumptionMode::ResolveDemand,
        },
        threads: runner::threads_from_env(),
    };
    match runner::run(command, &args.scenarios, &opts) {
        Ok(outcome) => {
            for path in &outcome.files {
                println!("{}", path.display());
            }
            if command == Command::Verify {
                for report in &outcome.reports {
                    for c in &report.checks {
                        println!(
                            "{:<44} {:>9} {:.3e} (tol {:.1e})",
                            c.name,
                            format!("{:?}", c.status).to_lowercase(),
                            c.value,
                            c.tolerance
                        );
                    }
                }
            }
            if outcome.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECKS_FAILED as u8)
            }
        }
        Err(e) => {
            eprintln!("{}", runner::error_line(&e));
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}
