use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Label};
use crate::error::{CoreError, Result};

/// Share of normal samples held out of training per fold.
pub const HOLDOUT_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub seed: u64,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl FoldSplit {
    /// Checks one-class training, disjointness and bounds against `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut seen = vec![false; dataset.len()];
        for (name, idx) in [("train", &self.train_idx), ("val", &self.val_idx), ("test", &self.test_idx)] {
            for &i in idx {
                if i >= dataset.len() {
                    return Err(CoreError::Split(format!("{name} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(CoreError::Split(format!("index {i} appears twice")));
                }
            }
        }
        if let Some(i) = self.train_idx.iter().find(|&&i| dataset.samples[i].label.is_abnormal()) {
            return Err(CoreError::Split(format!("training index {i} is abnormal")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds `k` one-class folds.
///
/// Normal indices are shuffled once; each fold holds out a window of 15% of
/// them starting at `fold * n / k` (wrapping), and trains on the rest. The
/// holdout normals and all abnormals (reshuffled per fold) are halved into
/// validation and test, with the odd sample going to validation. Index lists
/// are sorted.
pub fn make_splits(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(CoreError::Split(format!("need at least 2 folds, got {k}")));
    }
    let (mut normals, abnormals): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.samples[i].label == Label::Normal);
    if abnormals.len() < 2 {
        return Err(CoreError::Split(format!(
            "{} abnormal samples cannot be stratified into validation and test",
            abnormals.len()
        )));
    }
    let n = normals.len();
    let holdout = (n as f64 * HOLDOUT_FRACTION).round() as usize;
    if holdout < 2 || holdout >= n {
        return Err(CoreError::Split(format!("{n} normal samples are too few for a 15% holdout")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normals.shuffle(&mut rng);

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let start = fold * n / k;
        let window: Vec<usize> = (0..holdout).map(|j| normals[(start + j) % n]).collect();
        let mut in_window = vec![false; n];
        for j in 0..holdout {
            in_window[(start + j) % n] = true;
        }
        let mut train: Vec<usize> = (0..n).filter(|&j| !in_window[j]).map(|j| normals[j]).collect();

        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold as u64 + 1)));
        let mut ab = abnormals.clone();
        ab.shuffle(&mut fold_rng);

        let (nv, av) = (holdout.div_ceil(2), ab.len().div_ceil(2));
        let mut val: Vec<usize> = window[..nv].iter().chain(&ab[..av]).copied().collect();
        let mut test: Vec<usize> = window[nv..].iter().chain(&ab[av..]).copied().collect();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        folds.push(FoldSplit { fold_id: fold, seed, train_idx: train, val_idx: val, test_idx: test });
    }
    Ok(folds)
}
