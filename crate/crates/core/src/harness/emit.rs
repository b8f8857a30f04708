//! CSV and JSON output of a batch, and reading it back.
//!
//! Files carry no timestamps or host information, so rerunning a batch with
//! the same configuration reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BatchResult, BatchTables, ExperimentConfig, ExperimentRecord, ProposalSummary, SCHEMA_VERSION};
use crate::error::{HpiError, Result};
use crate::hpi::StepDiagnostics;
use crate::model::ModeId;

pub const EXPERIMENTS_FILE: &str = "experiments.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TABLES_FILE: &str = "tables.json";

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Creates `dir` if needed and checks that it accepts new files.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".hpi-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub experiment_id: usize,
    pub step: usize,
    pub t: f64,
    pub mode: usize,
    pub lambda: f64,
    pub var_alpha: f64,
    pub du_norm: f64,
    pub failures: usize,
    pub mismatches: usize,
    pub fallback: bool,
    pub jumps: usize,
}

impl DiagnosticRow {
    fn new(experiment_id: usize, d: &StepDiagnostics) -> Self {
        Self {
            experiment_id,
            step: d.step,
            t: d.t,
            mode: d.mode.0,
            lambda: d.lambda,
            var_alpha: d.var_alpha,
            du_norm: d.du_norm,
            failures: d.failures,
            mismatches: d.mismatches,
            fallback: d.fallback,
            jumps: d.jumps,
        }
    }

    fn into_diagnostics(self) -> StepDiagnostics {
        StepDiagnostics {
            step: self.step,
            t: self.t,
            mode: ModeId(self.mode),
            lambda: self.lambda,
            var_alpha: self.var_alpha,
            du_norm: self.du_norm,
            failures: self.failures,
            mismatches: self.mismatches,
            fallback: self.fallback,
            jumps: self.jumps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub version: String,
    pub config: ExperimentConfig,
    pub system_params: serde_json::Value,
    pub proposal: ProposalSummary,
    pub experiment_seeds: Vec<u64>,
    pub files: Vec<String>,
}

pub fn write_experiments(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics(path: &Path, diagnostics: &[Vec<StepDiagnostics>], records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (r, series) in records.iter().zip(diagnostics) {
        for d in series {
            w.serialize(DiagnosticRow::new(r.experiment_id, d))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes the four batch files into `dir` and returns their paths.
pub fn emit(batch: &BatchResult, dir: &Path) -> Result<Vec<PathBuf>> {
    prepare_output_dir(dir)?;
    let tables = batch.tables();
    let mut files = vec![EXPERIMENTS_FILE, DIAGNOSTICS_FILE, MANIFEST_FILE];
    if tables.is_ok() {
        files.push(TABLES_FILE);
    }
    write_experiments(&dir.join(EXPERIMENTS_FILE), &batch.records)?;
    write_diagnostics(&dir.join(DIAGNOSTICS_FILE), &batch.diagnostics, &batch.records)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        version: VERSION.to_string(),
        config: batch.config.clone(),
        system_params: batch.system_params.clone(),
        proposal: batch.proposal.clone(),
        experiment_seeds: batch.records.iter().map(|r| r.seed).collect(),
        files: files.iter().map(|f| f.to_string()).collect(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    match tables {
        Ok(t) => write_json(&dir.join(TABLES_FILE), &t)?,
        Err(e) => log::warn!("no tables written: {e}"),
    }
    Ok(files.iter().map(|f| dir.join(f)).collect())
}

pub fn read_experiments(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Groups diagnostic rows by experiment, aligned with `records`.
pub fn read_diagnostics(path: &Path, records: &[ExperimentRecord]) -> Result<Vec<Vec<StepDiagnostics>>> {
    let mut out = vec![Vec::new(); records.len()];
    let mut r = csv::Reader::from_path(path)?;
    for row in r.deserialize::<DiagnosticRow>() {
        let row = row?;
        let slot = records
            .iter()
            .position(|rec| rec.experiment_id == row.experiment_id)
            .ok_or_else(|| HpiError::Statistics(format!("diagnostics for unknown experiment {}", row.experiment_id)))?;
        out[slot].push(row.into_diagnostics());
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(HpiError::Config(format!(
            "manifest schema version {} is not supported (expected {SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

/// Recomputes the tables of a batch directory from its CSV files.
pub fn tables_from_dir(dir: &Path) -> Result<BatchTables> {
    let records = read_experiments(&dir.join(EXPERIMENTS_FILE))?;
    let diagnostics = read_diagnostics(&dir.join(DIAGNOSTICS_FILE), &records)?;
    BatchTables::compute(&records, &diagnostics)
}

pub fn write_tables(dir: &Path, tables: &BatchTables) -> Result<()> {
    write_json(&dir.join(TABLES_FILE), tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unwritable_target_fails() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(prepare_output_dir(&file.join("sub")).is_err());
    }

    #[test]
    fn records_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = ExperimentRecord {
            experiment_id: 3,
            seed: u64::MAX,
            proposal_cost: 1.0 / 3.0,
            hpi_cost: f64::NAN,
            improvement: -0.25,
            jump_count: 2,
            segment_step: Some(17),
            segment_time: None,
            multi_jump: true,
            fallbacks: 0,
            error: Some("boom, \"quoted\"".into()),
        };
        let path = tmp.path().join(EXPERIMENTS_FILE);
        write_experiments(&path, std::slice::from_ref(&rec)).unwrap();
        let back = read_experiments(&path).unwrap();
        assert_eq!(back[0].proposal_cost, rec.proposal_cost);
        assert!(back[0].hpi_cost.is_nan());
        assert_eq!(back[0].segment_step, Some(17));
        assert_eq!(back[0].segment_time, None);
        assert_eq!(back[0].error, rec.error);
    }
}
