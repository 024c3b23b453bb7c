use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ricci_lab::report::{write_json, Envelope, Series};
use serde::Serialize;

/// Configuration rejected before any computation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Everything a command produces; written only after it succeeded.
pub struct Run {
    pub command: &'static str,
    pub pass: bool,
    pub summary: String,
    pub report: String,
    pub series: Series,
    /// Replaces `series` when the CSV is produced elsewhere.
    pub raw_csv: Option<Vec<u8>>,
    /// Extra files as `(suffix, contents)`, e.g. `("traj.jsonl", ..)`.
    pub extra: Vec<(String, Vec<u8>)>,
    /// Counterexample payloads, written as `<command>-certificates.json`.
    pub certificates: Option<String>,
}

pub struct Written {
    pub reports: Vec<PathBuf>,
    pub certificates: Vec<PathBuf>,
}

impl Run {
    /// Serializes the envelope. `extra` asserted thresholds go into it.
    pub fn new<C: Serialize, R: Serialize>(
        command: &'static str,
        seed: Option<u64>,
        config: &C,
        report: &R,
        pass: bool,
        asserted: &[(&str, f64)],
    ) -> anyhow::Result<Self> {
        let mut env = Envelope::new(command, seed, config, report, pass);
        for (k, v) in asserted {
            env = env.assert_value(k, *v);
        }
        if !pass {
            env.certificates.push(format!("{command}-certificates.json"));
        }
        let mut s = serde_json::to_string_pretty(&env)?;
        s.push('\n');
        Ok(Self { command, pass, summary: String::new(), report: s, series: Series::default(), raw_csv: None, extra: Vec::new(), certificates: None })
    }

    pub fn with_series(mut self, s: Series) -> Self {
        self.series = s;
        self
    }

    pub fn with_raw_csv(mut self, bytes: Vec<u8>) -> Self {
        self.raw_csv = Some(bytes);
        self
    }

    pub fn with_summary(mut self, s: impl Into<String>) -> Self {
        self.summary = s.into();
        self
    }

    pub fn with_extra(mut self, suffix: &str, bytes: Vec<u8>) -> Self {
        self.extra.push((suffix.to_string(), bytes));
        self
    }

    pub fn with_certificates<T: Serialize>(mut self, value: &T) -> anyhow::Result<Self> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.certificates = Some(s);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<Written> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut reports = Vec::new();
        let json = dir.join(format!("{}.json", self.command));
        fs::write(&json, &self.report).with_context(|| format!("writing {}", json.display()))?;
        reports.push(json);
        let csv = dir.join(format!("{}.csv", self.command));
        match &self.raw_csv {
            Some(b) => fs::write(&csv, b).with_context(|| format!("writing {}", csv.display()))?,
            None => self.series.write_csv(&csv)?,
        }
        reports.push(csv);
        for (suffix, bytes) in &self.extra {
            let p = dir.join(format!("{}.{suffix}", self.command));
            fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
            reports.push(p);
        }
        let mut certificates = Vec::new();
        if !self.pass {
            let p = dir.join(format!("{}-certificates.json", self.command));
            match &self.certificates {
                Some(c) => fs::write(&p, c)?,
                None => write_json(&p, &serde_json::json!({ "note": "no per-sample certificate for this command; see the report" }))?,
            }
            certificates.push(p);
        }
        Ok(Written { reports, certificates })
    }
}
