use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mesoed_cli::scenario::{schema, Overrides, EXPERIMENTS};
use mesoed_cli::{run_file, validate_file, EXIT_VALIDATION};

#[derive(Parser)]
#[command(
    name = "mesoed",
    version,
    about = "Run mesoscopic electrodynamics scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write results.csv, meta.json and, for audits, verdicts.csv.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's replication count.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results do not depend on this.
        #[arg(long, env = "MESOED_THREADS")]
        threads: Option<usize>,
    },
    /// Check a scenario without running it.
    Validate { scenario: PathBuf },
    /// List the experiment kinds a scenario can request.
    ListExperiments,
    /// Print the JSON schema of scenario files.
    Schema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            reps,
            seed,
            threads,
        } => match run_file(&scenario, &out, Overrides { n_reps: reps, seed }, threads) {
            Ok(code) => ExitCode::from(code),
            Err(e) => {
                eprintln!("mesoed: {e}");
                ExitCode::from(e.exit_code())
            }
        },
        Command::Validate { scenario } => match validate_file(&scenario, Overrides::default()) {
            Ok(p) => {
                println!(
                    "{}: valid {} scenario",
                    scenario.display(),
                    p.scenario.experiment.kind()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("mesoed: invalid scenario: {e}");
                ExitCode::from(EXIT_VALIDATION)
            }
        },
        Command::ListExperiments => {
            for (kind, description) in EXPERIMENTS {
                println!("{kind:<16} {description}");
            }
            ExitCode::SUCCESS
        }
        Command::Schema => {
            println!(
                "{}",
                serde_json::to_string_pretty(&schema()).expect("schema serialises")
            );
            ExitCode::SUCCESS
        }
    }
}
