use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Label, SeriesSample};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumn {
    First,
    Last,
    Index(usize),
}

/// Column roles of an input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub label_column: LabelColumn,
    /// Inclusive-exclusive column range holding the series; all non-label
    /// columns when absent.
    pub value_columns: Option<(usize, usize)>,
    pub has_header: bool,
    /// Label spellings that mean "normal"; every other label is abnormal.
    /// Numeric labels are compared by value, so "0.0" matches "0".
    pub normal_labels: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: LabelColumn::Last,
            value_columns: None,
            has_header: false,
            normal_labels: vec!["0".into(), "N".into()],
        }
    }
}

impl CsvSchema {
    fn map_label(&self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        if raw.is_empty() {
            return None;
        }
        let numeric = raw.parse::<f64>().ok();
        let normal = self.normal_labels.iter().any(|n| match (numeric, n.parse::<f64>().ok()) {
            (Some(a), Some(b)) => a == b,
            _ => n == raw,
        });
        Some(if normal { Label::Normal } else { Label::Abnormal })
    }
}

/// Reads one sample per row. Row numbers in errors are 1-based and count
/// the header line when present.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let first_row = if schema.has_header { 2 } else { 1 };
    let mut width = None;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = first_row + i;
        let record = record.map_err(|e| CoreError::Ingest { row, reason: e.to_string() })?;
        if record.len() == 1 && record.get(0).is_some_and(str::is_empty) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(CoreError::Ingest { row, reason: format!("expected {w} columns, found {}", record.len()) })
            }
            _ => {}
        }
        let n = record.len();
        let label_idx = match schema.label_column {
            LabelColumn::First => 0,
            LabelColumn::Last => n.saturating_sub(1),
            LabelColumn::Index(i) => i,
        };
        if label_idx >= n || n < 2 {
            return Err(CoreError::Ingest { row, reason: format!("label column {label_idx} missing in {n} columns") });
        }
        let raw_label = &record[label_idx];
        let label = schema
            .map_label(raw_label)
            .ok_or_else(|| CoreError::Ingest { row, reason: "empty label".into() })?;
        let (start, end) = schema.value_columns.unwrap_or((0, n));
        if end > n || start >= end {
            return Err(CoreError::Ingest { row, reason: format!("value columns {start}..{end} outside {n} columns") });
        }
        let mut values = Vec::with_capacity(end - start);
        for col in start..end {
            if col == label_idx {
                continue;
            }
            let cell = &record[col];
            let v: f64 = cell
                .parse()
                .map_err(|_| CoreError::Ingest { row, reason: format!("column {col}: {cell:?} is not a number") })?;
            if !v.is_finite() {
                return Err(CoreError::Ingest { row, reason: format!("column {col}: non-finite value") });
            }
            values.push(v);
        }
        samples.push(SeriesSample { values, label, source_id: format!("{name}:{}", samples.len()) });
    }
    if samples.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    Dataset::new(name, samples)
}
