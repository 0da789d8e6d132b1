use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{CoreError, Result};

/// Global min/max of a dataset, fitted once on the training split and
/// reused on every other split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
}

/// Counts of values that fell outside the fitted range when stats were
/// applied to another split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub values: usize,
    pub below_range: usize,
    pub above_range: usize,
    pub observed_min: f64,
    pub observed_max: f64,
}

impl NormalizationReport {
    pub fn out_of_range(&self) -> bool {
        self.below_range + self.above_range > 0
    }
}

impl MinMaxStats {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in dataset.samples.iter().flat_map(|s| &s.values) {
            min = min.min(*v);
            max = max.max(*v);
        }
        if max <= min {
            return Err(CoreError::DegenerateRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }

    /// Affine map into the fitted range. Values outside it are kept as-is
    /// (so they may land outside [0, 1]) and counted in the report.
    pub fn apply(&self, dataset: &Dataset) -> (Dataset, NormalizationReport) {
        let mut report = NormalizationReport {
            observed_min: f64::INFINITY,
            observed_max: f64::NEG_INFINITY,
            ..Default::default()
        };
        let mut out = dataset.clone();
        for s in &mut out.samples {
            for v in &mut s.values {
                report.values += 1;
                report.observed_min = report.observed_min.min(*v);
                report.observed_max = report.observed_max.max(*v);
                if *v < self.min {
                    report.below_range += 1;
                } else if *v > self.max {
                    report.above_range += 1;
                }
                *v = self.scale(*v);
            }
        }
        (out, report)
    }

    pub fn invert(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        for v in out.samples.iter_mut().flat_map(|s| s.values.iter_mut()) {
            *v = self.unscale(*v);
        }
        out
    }
}

/// Fits min/max on `dataset` and maps it into [0, 1].
pub fn normalize_minmax(dataset: &Dataset) -> Result<(Dataset, MinMaxStats)> {
    let stats = MinMaxStats::fit(dataset)?;
    Ok((stats.apply(dataset).0, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, SeriesSample};
    use proptest::prelude::*;

    fn ds(rows: Vec<Vec<f64>>) -> Dataset {
        let samples = rows
            .into_iter()
            .enumerate()
            .map(|(i, values)| SeriesSample { values, label: Label::Normal, source_id: i.to_string() })
            .collect();
        Dataset::new("t", samples).unwrap()
    }

    #[test]
    fn symmetric_range_midpoint() {
        let (out, stats) = normalize_minmax(&ds(vec![vec![-5.0, 0.0, 5.0]])).unwrap();
        assert_eq!(out.samples[0].values, vec![0.0, 0.5, 1.0]);
        assert_eq!(stats, MinMaxStats { min: -5.0, max: 5.0 });
    }

    #[test]
    fn unit_range_is_unchanged() {
        let x = ds(vec![vec![0.0, 0.3, 1.0], vec![0.7, 0.2, 0.9]]);
        assert_eq!(normalize_minmax(&x).unwrap().0, x);
    }

    #[test]
    fn constant_dataset_is_degenerate() {
        assert!(matches!(normalize_minmax(&ds(vec![vec![2.0; 4]])), Err(CoreError::DegenerateRange { .. })));
    }

    #[test]
    fn train_stats_on_validation_flag_overflow() {
        let (_, stats) = normalize_minmax(&ds(vec![vec![0.0, 10.0]])).unwrap();
        let (val, report) = stats.apply(&ds(vec![vec![5.0, 12.0]]));
        assert_eq!(val.samples[0].values, vec![0.5, 1.2]);
        assert!(report.out_of_range());
        assert_eq!(report.above_range, 1);
        assert_eq!(report.below_range, 0);
    }

    proptest! {
        #[test]
        fn inverse_recovers_inputs(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..8)) {
            let x = ds(rows);
            prop_assume!(MinMaxStats::fit(&x).is_ok());
            let (n, stats) = normalize_minmax(&x).unwrap();
            for v in n.samples.iter().flat_map(|s| &s.values) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let back = stats.invert(&n);
            for (a, b) in back.samples.iter().flat_map(|s| &s.values).zip(x.samples.iter().flat_map(|s| &s.values)) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
