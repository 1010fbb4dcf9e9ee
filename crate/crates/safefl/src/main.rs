use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safefl::config::ExperimentConfig;
use safefl::experiment::{run_experiment, write_outputs};

#[derive(Parser)]
#[command(
    name = "safefl",
    about = "Federated-learning robustness workbench: attacks, robust aggregation, and trajectory-based malicious-client detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file and write the CSV reports.
    Run {
        /// Path to the TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for rounds.csv, summary.csv and snapshots.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = match ExperimentConfig::from_file(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {}", e);
                    return ExitCode::from(2);
                }
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let result = match run_experiment(&cfg) {
                Ok(result) => result,
                Err(e) => {
                    eprintln!("error: {}", e);
                    return ExitCode::FAILURE;
                }
            };
            if let Err(e) = write_outputs(&cfg, &result, &out) {
                eprintln!("error: {}", e);
                return ExitCode::FAILURE;
            }
            let s = &result.summary;
            println!(
                "attack={} defense={} ar={} rounds={} dacc={} fpr={} fnr={} final_tacc={:.4} final_asr={}",
                s.attack,
                s.defense,
                s.ar,
                s.rounds,
                fmt(s.dacc),
                fmt(s.fpr),
                fmt(s.fnr),
                s.final_tacc,
                fmt(s.final_asr),
            );
            ExitCode::SUCCESS
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", x),
        None => "NA".to_string(),
    }
}
