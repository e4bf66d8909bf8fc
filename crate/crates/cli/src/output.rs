//! Writers for results.csv, verdicts.csv and meta.json.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use crate::experiments::{Row, VerdictRow, MANIFEST};
use crate::scenario::{Prepared, SCHEMA_VERSION};

pub const RESULTS_HEADER: [&str; 8] = [
    "experiment",
    "quantity",
    "step",
    "mode",
    "step2",
    "mode2",
    "value",
    "std_err",
];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results(path: &Path, label: &str, rows: &[Row]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            label.to_string(),
            r.quantity.to_string(),
            opt(r.step),
            opt(r.mode),
            opt(r.step2),
            opt(r.mode2),
            format_float(r.value),
            r.std_err.map(format_float).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_verdicts(path: &Path, verdicts: &[VerdictRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "subject",
        "step",
        "verdict",
        "first_violation_step",
        "first_violation_mode",
    ])?;
    for v in verdicts {
        w.write_record([
            v.subject.clone(),
            v.step.to_string(),
            if v.passed { "PASS" } else { "FAIL" }.to_string(),
            opt(v.first_violation.map(|x| x.0)),
            opt(v.first_violation.map(|x| x.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct RunInfo {
    pub wall_time_seconds: f64,
    pub threads: usize,
    pub files: Vec<&'static str>,
}

pub fn write_meta(path: &Path, prepared: &Prepared, rows: &[Row], info: &RunInfo) -> Result<()> {
    let used: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.quantity).collect();
    let manifest: BTreeMap<&str, &str> = MANIFEST
        .iter()
        .filter(|(q, _)| used.contains(q))
        .copied()
        .collect();
    let grid = prepared.grid.map(
        |g| json!({ "t0": g.t0(), "dt": g.dt(), "n_steps": g.n_steps(), "n_modes": g.n_modes() }),
    );
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "library_version": mesoed::VERSION,
        "experiment": prepared.scenario.experiment.kind(),
        "label": prepared.label,
        "seed": prepared.seed,
        "n_reps": prepared.n_reps,
        "grid": grid,
        "threads": info.threads,
        "wall_time_seconds": info.wall_time_seconds,
        "files": info.files,
        "manifest": manifest,
        "scenario": prepared.scenario,
    });
    let mut file =
        std::fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    serde_json::to_writer_pretty(&mut file, &meta)?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn failed_verdict_records_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.csv");
        let verdicts = [
            VerdictRow {
                subject: "device:1".into(),
                step: 0,
                passed: true,
                first_violation: None,
            },
            VerdictRow {
                subject: "network".into(),
                step: 3,
                passed: false,
                first_violation: Some((2, 1)),
            },
        ];
        write_verdicts(&path, &verdicts).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "device:1,0,PASS,,");
        assert_eq!(lines[2], "network,3,FAIL,2,1");
        assert!(!text.contains('\r'));
    }
}
