use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Binary confusion matrix with "abnormal" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(truth: &[bool], predicted: &[bool]) -> Self {
        assert_eq!(truth.len(), predicted.len(), "label vectors differ in length");
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

fn f1(hit: usize, false_alarm: usize, miss: usize) -> f64 {
    let denom = 2 * hit + false_alarm + miss;
    if denom == 0 {
        0.0
    } else {
        2.0 * hit as f64 / denom as f64
    }
}

/// Per-class F1 averaged with class-support weights.
pub fn weighted_f1(c: &Confusion) -> f64 {
    let n = c.total();
    if n == 0 {
        return 0.0;
    }
    let f_pos = f1(c.tp, c.fp, c.fn_);
    let f_neg = f1(c.tn, c.fn_, c.fp);
    (c.positives() as f64 * f_pos + c.negatives() as f64 * f_neg) / n as f64
}

/// Matthews / phi correlation; 0 when any marginal is empty.
pub fn phi_coefficient(c: &Confusion) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Rank-based area under the ROC curve; tied scores share their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::contract("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::UndefinedMetric("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreError::contract("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_f1: f64,
    pub phi: f64,
    /// `None` when one class is absent.
    pub auroc: Option<f64>,
    pub confusion: Confusion,
    pub support_normal: usize,
    pub support_abnormal: usize,
}

impl MetricsReport {
    pub fn new(scores: &[f64], truth: &[bool], predicted: &[bool]) -> Result<Self> {
        if scores.len() != truth.len() || truth.len() != predicted.len() {
            return Err(CoreError::contract("scores, truth and predictions differ in length"));
        }
        let confusion = Confusion::from_labels(truth, predicted);
        let auroc = match auroc(scores, truth) {
            Ok(v) => Some(v),
            Err(CoreError::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            weighted_f1: weighted_f1(&confusion),
            phi: phi_coefficient(&confusion),
            auroc,
            confusion,
            support_normal: confusion.negatives(),
            support_abnormal: confusion.positives(),
        })
    }
}
