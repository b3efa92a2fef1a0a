use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dimm::error::DimmError;
use dimm::io::{cmd_fit, cmd_gof, cmd_simulate, FitConfig, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "dimm", version, about = "Distributed and integrated method of moments for correlated panels")]
struct Cli {
    /// Concurrent workers for block fits and replicates.
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit blocks, integrate them and write a JSON report.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a Monte-Carlo scenario file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory for `<name>_report.json` and `<name>_replicates.csv`.
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Evaluate Q_N and the CEF log-density at a given coefficient vector.
    Gof {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated coefficients, e.g. `0.3,-1.2`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        beta: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<String, DimmError> {
    match cli.command {
        Command::Fit { config } => {
            let cfg = FitConfig::load(&config)?;
            let report = cmd_fit(&cfg, cli.workers)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(json(&report))
        }
        Command::Simulate { config, output_dir } => {
            let out = cmd_simulate(&config, &output_dir, cli.workers)?;
            eprintln!("wrote {} and {}", out.report_path.display(), out.table_path.display());
            Ok(json(&out.outcome.report))
        }
        Command::Gof { config, beta } => {
            let cfg = FitConfig::load(&config)?;
            Ok(json(&cmd_gof(&cfg, &beta, cli.workers)?))
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
