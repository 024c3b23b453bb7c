//! Report envelopes and plot-data files.
//!
//! Reports carry everything needed to re-run them: the command, its full
//! configuration, the seed, the build and the tolerances that were applied.
//! Nothing time- or host-dependent goes in, so identical runs give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::tol::Tolerances;

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Serialize)]
pub struct Envelope<'a, C: Serialize, R: Serialize> {
    pub command: &'a str,
    pub build: &'a str,
    pub seed: Option<u64>,
    pub config: &'a C,
    pub tolerances: Tolerances,
    /// Command-specific thresholds, by name.
    pub asserted: BTreeMap<String, f64>,
    pub pass: bool,
    /// Files holding counterexamples, relative to the report.
    pub certificates: Vec<String>,
    pub report: &'a R,
}

impl<'a, C: Serialize, R: Serialize> Envelope<'a, C, R> {
    pub fn new(command: &'a str, seed: Option<u64>, config: &'a C, report: &'a R, pass: bool) -> Self {
        Self {
            command,
            build: BUILD_ID,
            seed,
            config,
            tolerances: Tolerances::default(),
            asserted: BTreeMap::new(),
            pass,
            certificates: Vec::new(),
            report,
        }
    }

    pub fn assert_value(mut self, name: &str, value: f64) -> Self {
        self.asserted.insert(name.to_string(), value);
        self
    }
}

fn io_err(path: &Path, e: std::io::Error) -> LabError {
    LabError::Diagnostic(format!("{}: {e}", path.display()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

/// Numeric table written as CSV, one row per record.
#[derive(Debug, Clone, Default)]
pub struct Series {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Opens `path` for buffered writing (JSON-lines streams).
pub fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_is_stable() {
        #[derive(Serialize)]
        struct Cfg {
            n: usize,
        }
        let cfg = Cfg { n: 3 };
        let rep = vec![1.5, f64::INFINITY];
        let a = serde_json::to_string(&Envelope::new("x", Some(7), &cfg, &rep, true).assert_value("tol", 1e-8)).unwrap();
        let b = serde_json::to_string(&Envelope::new("x", Some(7), &cfg, &rep, true).assert_value("tol", 1e-8)).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"build\""));
        assert!(a.contains("null"));
    }

    #[test]
    fn csv_layout() {
        let mut s = Series::new(&["t", "v"]);
        s.push(vec![0.0, 1.0]);
        let mut out = Vec::new();
        s.write_to(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,v\n0e0,1e0\n");
    }
}
