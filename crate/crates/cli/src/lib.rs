//! Scenario runner behind the `mesoed` binary.

pub mod experiments;
pub mod output;
pub mod scenario;

use std::path::Path;
use std::time::Instant;

use experiments::{execute, Outcome};
use output::{write_meta, write_results, write_verdicts, RunInfo};
use scenario::{load, prepare, Overrides, Prepared, ValidationError};

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_AUDIT_FAILURE: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Validation(ValidationError),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(e) => write!(f, "invalid scenario: {e}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::Validation(e)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Loads and validates a scenario file without running it.
pub fn validate_file(path: &Path, overrides: Overrides) -> Result<Prepared, ValidationError> {
    let base = path.parent().unwrap_or(Path::new("."));
    prepare(load(path)?, base, overrides)
}

/// Runs a scenario and writes its outputs into `out_dir`. Returns the exit
/// code: success, or audit failure when any causality verdict failed.
pub fn run_file(
    path: &Path,
    out_dir: &Path,
    overrides: Overrides,
    threads: Option<usize>,
) -> Result<u8, CliError> {
    let prepared = validate_file(path, overrides)?;
    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            builder = builder.num_threads(t);
        }
        builder.build().map_err(anyhow::Error::from)?
    };
    let start = Instant::now();
    let outcome: Outcome = pool.install(|| execute(&prepared))?;
    let wall = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(out_dir).map_err(anyhow::Error::from)?;
    write_results(&out_dir.join("results.csv"), &prepared.label, &outcome.rows)?;
    let mut files = vec!["results.csv", "meta.json"];
    if let Some(verdicts) = &outcome.verdicts {
        write_verdicts(&out_dir.join("verdicts.csv"), verdicts)?;
        files.push("verdicts.csv");
    }
    let info = RunInfo {
        wall_time_seconds: wall,
        threads: pool.current_num_threads(),
        files,
    };
    write_meta(&out_dir.join("meta.json"), &prepared, &outcome.rows, &info)?;
    Ok(if outcome.audit_failed() {
        EXIT_AUDIT_FAILURE
    } else {
        EXIT_SUCCESS
    })
}
