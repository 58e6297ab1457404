use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcdnet::handshake::DEFAULT_TARGET_PROBABILITY;
use lcdnet_bench::report::engines_path;
use lcdnet_bench::{formulas, run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "lcdnet-bench", version, about = "Run lcdnet experiment scenarios and emit CSV")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Results CSV. Per-engine counters go next to it as `<stem>_engines.csv`.
        /// Defaults to the scenario's `output`, else stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print handshake batch sizes for each engine count.
    Formulas {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        n: Vec<u32>,
        #[arg(long, default_value_t = DEFAULT_TARGET_PROBABILITY)]
        p: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, seed, out } => {
            let sc = match Scenario::from_path(&scenario) {
                Ok(sc) => sc,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let seed = seed.or(sc.seed).unwrap_or(0);
            let output = match run_scenario(&sc, seed) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            match out.or(sc.output.clone()) {
                Some(path) => {
                    let written = output
                        .results
                        .write_file(&path)
                        .and_then(|_| output.engines.write_file(&engines_path(&path)));
                    if let Err(e) = written {
                        eprintln!("error: writing {}: {e}", path.display());
                        return ExitCode::FAILURE;
                    }
                }
                None => print!("{}", output.results.to_csv_string()),
            }
            if output.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                for v in &output.violations {
                    eprintln!("invariant violated: {v}");
                }
                ExitCode::from(3)
            }
        }
        Command::Formulas { n, p, out } => {
            let table = match formulas::formula_table(&n, p) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match out {
                Some(path) => {
                    if let Err(e) = table.write_file(&path) {
                        eprintln!("error: writing {}: {e}", path.display());
                        return ExitCode::FAILURE;
                    }
                }
                None => print!("{}", table.to_csv_string()),
            }
            ExitCode::SUCCESS
        }
    }
}
