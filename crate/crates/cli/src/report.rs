//! Experiment reports and their CSV/JSON serialization.

use std::path::{Path, PathBuf};

use nonlocal_acf::functionals::Outcome;
use nonlocal_acf::Estimate;
use serde::{Deserialize, Serialize};

use crate::config::{Claim, ExperimentConfig};
use crate::error::{io_error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A named scalar with its error estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
    pub error: f64,
}

impl Quantity {
    pub fn new(name: impl Into<String>, value: f64, error: f64) -> Self {
        Quantity {
            name: name.into(),
            value,
            error,
        }
    }

    pub fn from_estimate(name: impl Into<String>, e: Estimate) -> Self {
        Quantity::new(name, e.value, e.error)
    }

    /// A value that is exact by construction (closed forms, counts).
    pub fn exact(name: impl Into<String>, value: f64) -> Self {
        Quantity::new(name, value, 0.0)
    }
}

/// One pass/fail test inside an experiment. `value` is compared against `tolerance`
/// as described in `detail`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    pub fn flag(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            value: if passed { 1.0 } else { 0.0 },
            tolerance: 1.0,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    /// Shortest round-trip text, so CSV output is exact and reproducible.
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v:e}"),
            Cell::Text(t) => t.clone(),
        }
    }
}

/// Per-point records; the column set is fixed per claim.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub claim: Claim,
    pub status: Outcome,
    pub checks: Vec<Check>,
    pub summary: Vec<Quantity>,
    pub table: Table,
    /// Assumptions and interpretation notes.
    pub notes: Vec<String>,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
    pub library_version: String,
}

impl Report {
    pub fn quantity(&self, name: &str) -> Option<&Quantity> {
        self.summary.iter().find(|q| q.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`, each atomically.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        let name = self.config.name();
        let csv_path = dir.join(format!("{name}.csv"));
        let json_path = dir.join(format!("{name}.json"));
        write_atomic(&csv_path, &self.table.to_csv()?)?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&json_path, &json)?;
        Ok((csv_path, json_path))
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(io_error(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_error(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_round_trip_numbers() {
        let mut t = Table::new(&["x", "label"]);
        t.push(vec![0.1.into(), "a,b".into()]);
        t.push(vec![(1.0 / 3.0).into(), "c".into()]);
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(text, "x,label\n1e-1,\"a,b\"\n3.333333333333333e-1,c\n");
        let third: f64 = "3.333333333333333e-1".parse().unwrap();
        assert_eq!(third, 1.0 / 3.0);
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn rejects_ragged_rows() {
        let mut t = Table::new(&["x"]);
        t.push(vec![1.0.into(), 2.0.into()]);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
