//! Append-only JSON-lines run log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Microseconds since the Unix epoch, strictly increasing per log.
    pub timestamp_us: u64,
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
}

pub struct EventLog {
    path: PathBuf,
    file: File,
    last: u64,
}

impl EventLog {
    /// Opens for appending, continuing after the last recorded timestamp.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let last = read_events(&path).unwrap_or_default().last().map_or(0, |r| r.timestamp_us);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening event log {}", path.display()))?;
        Ok(Self { path, file, last })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(
        &mut self,
        phase: &str,
        fold: Option<usize>,
        metrics: impl IntoIterator<Item = (String, f64)>,
        artifacts: impl IntoIterator<Item = String>,
    ) -> Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64);
        self.last = now.max(self.last + 1);
        let record = RunRecord {
            timestamp_us: self.last,
            phase: phase.to_string(),
            fold,
            // non-finite values are not valid JSON numbers
            metrics: metrics.into_iter().filter(|(_, v)| v.is_finite()).collect(),
            artifacts: artifacts.into_iter().collect(),
        };
        let line = serde_json::to_string(&record)?;
        writeln!(self.file, "{line}").with_context(|| format!("writing {}", self.path.display()))?;
        Ok(())
    }
}

pub fn read_events(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}
