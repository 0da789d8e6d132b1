//! Dataset ingestion, resampling, normalization and one-class splits.

mod ingest;
mod normalize;
mod resample;
mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_csv, CsvSchema, LabelColumn};
pub use normalize::{normalize_minmax, MinMaxStats, NormalizationReport};
pub use resample::{linear_interpolate, lttb, resample};
pub use split::{make_splits, FoldSplit, HOLDOUT_FRACTION};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Abnormal),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSample {
    pub values: Vec<f64>,
    pub label: Label,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub seq_len: usize,
    pub samples: Vec<SeriesSample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<SeriesSample>) -> Result<Self> {
        let seq_len = samples.first().ok_or(CoreError::EmptyDataset)?.values.len();
        for (i, s) in samples.iter().enumerate() {
            if s.values.len() != seq_len {
                return Err(CoreError::contract(format!(
                    "sample {i} has length {}, expected {seq_len}",
                    s.values.len()
                )));
            }
            if let Some(v) = s.values.iter().find(|v| !v.is_finite()) {
                return Err(CoreError::contract(format!("sample {i} holds non-finite value {v}")));
            }
        }
        Ok(Self { name: name.into(), seq_len, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn abnormal_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.label.is_abnormal()).count() as f64 / self.samples.len() as f64
    }

    /// Resamples every sample to `target_len`.
    pub fn resampled(&self, target_len: usize) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(SeriesSample { values: resample(&s.values, target_len)?, label: s.label, source_id: s.source_id.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { name: self.name.clone(), seq_len: target_len, samples })
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| CoreError::contract(format!("index {i} out of range for {} samples", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { name: self.name.clone(), seq_len: self.seq_len, samples })
    }
}
