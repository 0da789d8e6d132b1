//! Turning error components into binary decisions: linear weight/threshold
//! search and the RBF-SVM alternative.

mod grid;
mod svm;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use grid::{fit_threshold, grid_search_linear, percent_grid, LinearFit, LinearGrid, Objective, SortedScores, TauGrid};
pub use svm::{
    calibrate_shift, class_weights, median_pairwise_distance, rbf, solve_smo, svm_train, FeatureSet, SmoSolution, SvmConfig,
    SvmModel,
};

use crate::error::{CoreError, Result};
use crate::metrics::Confusion;
use crate::scoring::{linear_unchecked, raw_triples, ComponentNormalizer, ErrorComponents, LTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComposerSpec {
    Linear {
        #[serde(default)]
        grid: LinearGrid,
        #[serde(default = "absolute")]
        l_transform: LTransform,
        #[serde(default)]
        objective: Objective,
    },
    Svm {
        feature_set: FeatureSet,
        #[serde(default)]
        svm: SvmConfig,
        #[serde(default = "signed")]
        l_transform: LTransform,
    },
}

fn absolute() -> LTransform {
    LTransform::Absolute
}

fn signed() -> LTransform {
    LTransform::Signed
}

impl ComposerSpec {
    /// Reconstruction score with a searched threshold.
    pub fn lambda0() -> Self {
        Self::Linear { grid: LinearGrid::reconstruction_only(), l_transform: LTransform::Absolute, objective: Objective::WeightedF1 }
    }

    pub fn lambda_grid() -> Self {
        Self::Linear { grid: LinearGrid::default(), l_transform: LTransform::Absolute, objective: Objective::WeightedF1 }
    }

    pub fn lambda_gamma_grid() -> Self {
        Self::Linear { grid: LinearGrid::lambda_gamma(), l_transform: LTransform::Absolute, objective: Objective::WeightedF1 }
    }

    pub fn svm_lambda() -> Self {
        Self::Svm { feature_set: FeatureSet::Rd, svm: SvmConfig::default(), l_transform: LTransform::Signed }
    }

    pub fn svm_gamma() -> Self {
        Self::Svm { feature_set: FeatureSet::Rdl, svm: SvmConfig::default(), l_transform: LTransform::Signed }
    }

    pub fn l_transform(&self) -> LTransform {
        match self {
            Self::Linear { l_transform, .. } | Self::Svm { l_transform, .. } => *l_transform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Linear { grid, .. } => {
                if grid.weight_pairs().is_empty() {
                    return Err(CoreError::contract("linear composer grid has no valid (lambda, gamma) pair"));
                }
                if let TauGrid::Quantiles(0) = grid.tau {
                    return Err(CoreError::contract("tau quantile count must be positive"));
                }
                Ok(())
            }
            Self::Svm { svm, .. } => svm.validate(),
        }
    }
}

/// The standard composer line-up, by name.
pub fn default_composers() -> Vec<(String, ComposerSpec)> {
    vec![
        ("lambda0".into(), ComposerSpec::lambda0()),
        ("lambda_grid".into(), ComposerSpec::lambda_grid()),
        ("svm_lambda".into(), ComposerSpec::svm_lambda()),
        ("svm_gamma".into(), ComposerSpec::svm_gamma()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Composition {
    Linear { lambda: f64, gamma: f64, tau: f64 },
    Svm(SvmModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionModel {
    pub composition: Composition,
    pub normalizer: ComponentNormalizer,
    pub l_transform: LTransform,
    /// Objective reached on the fit data.
    pub fit_objective: f64,
    pub fit_samples: usize,
    pub warnings: Vec<String>,
}

fn truth_of(components: &[ErrorComponents]) -> Result<Vec<bool>> {
    components
        .iter()
        .map(|c| c.is_abnormal().ok_or_else(|| CoreError::contract(format!("sample {} has no label", c.sample_id))))
        .collect()
}

/// Fits the normalizer and the composer on labelled components.
pub fn fit_composer(spec: &ComposerSpec, components: &[ErrorComponents]) -> Result<CompositionModel> {
    spec.validate()?;
    let labels = truth_of(components)?;
    let raw = raw_triples(components, spec.l_transform());
    let (normalizer, warnings) = ComponentNormalizer::fit(&raw)?;
    let points = normalizer.apply(&raw);
    let (composition, fit_objective) = match spec {
        ComposerSpec::Linear { grid, objective, .. } => {
            let fit = grid_search_linear(&points, &labels, grid, *objective)?;
            (Composition::Linear { lambda: fit.lambda, gamma: fit.gamma, tau: fit.tau }, fit.objective)
        }
        ComposerSpec::Svm { feature_set, svm, .. } => {
            let x: Vec<Vec<f64>> = points.iter().map(|p| feature_set.project(p)).collect();
            let model = svm_train(&x, &labels, *feature_set, svm)?;
            let predicted: Vec<bool> = x.iter().map(|p| model.decision(p).map(|d| d > 0.0)).collect::<Result<_>>()?;
            let value = Objective::WeightedF1.eval(&Confusion::from_labels(&labels, &predicted));
            (Composition::Svm(model), value)
        }
    };
    Ok(CompositionModel {
        composition,
        normalizer,
        l_transform: spec.l_transform(),
        fit_objective,
        fit_samples: components.len(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub sample_ids: Vec<String>,
    /// Linear score or signed SVM decision value.
    pub scores: Vec<f64>,
    pub predicted: Vec<bool>,
    pub truth: Vec<Option<bool>>,
    /// Present when every sample is labelled.
    pub confusion: Option<Confusion>,
}

impl CompositionModel {
    pub fn score_point(&self, normalized: &[f64; 3]) -> Result<f64> {
        match &self.composition {
            Composition::Linear { lambda, gamma, .. } => Ok(linear_unchecked(normalized, *lambda, *gamma)),
            Composition::Svm(m) => m.decision(&m.feature_set.project(normalized)),
        }
    }

    pub fn is_abnormal(&self, score: f64) -> bool {
        match &self.composition {
            Composition::Linear { tau, .. } => score > *tau,
            Composition::Svm(_) => score > 0.0,
        }
    }

    pub fn decide(&self, components: &[ErrorComponents]) -> Result<DecisionReport> {
        let points = self.normalizer.apply(&raw_triples(components, self.l_transform));
        let scores: Vec<f64> = points.iter().map(|p| self.score_point(p)).collect::<Result<_>>()?;
        let predicted: Vec<bool> = scores.iter().map(|&s| self.is_abnormal(s)).collect();
        let truth: Vec<Option<bool>> = components.iter().map(ErrorComponents::is_abnormal).collect();
        let confusion = truth
            .iter()
            .copied()
            .collect::<Option<Vec<bool>>>()
            .map(|t| Confusion::from_labels(&t, &predicted));
        Ok(DecisionReport {
            sample_ids: components.iter().map(|c| c.sample_id.clone()).collect(),
            scores,
            predicted,
            truth,
            confusion,
        })
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n: usize,
    pub grid_pairs: usize,
    pub grid_evaluations: usize,
    pub grid_seconds: f64,
    pub grid_objective: f64,
    pub svm_seconds: f64,
    pub svm_iterations: usize,
    pub svm_converged: bool,
    pub svm_support_vectors: usize,
    pub svm_objective: f64,
}

/// Wall-clock of the linear grid search against SVM training on the same
/// normalized points.
pub fn benchmark_search(
    points: &[[f64; 3]],
    labels: &[bool],
    grid: &LinearGrid,
    feature_set: FeatureSet,
    svm: &SvmConfig,
) -> Result<BenchmarkReport> {
    let t0 = Instant::now();
    let fit = grid_search_linear(points, labels, grid, Objective::WeightedF1)?;
    let grid_seconds = t0.elapsed().as_secs_f64();

    let x: Vec<Vec<f64>> = points.iter().map(|p| feature_set.project(p)).collect();
    let t1 = Instant::now();
    let model = svm_train(&x, labels, feature_set, svm)?;
    let svm_seconds = t1.elapsed().as_secs_f64();
    let predicted: Vec<bool> = x.iter().map(|p| model.decision(p).map(|d| d > 0.0)).collect::<Result<_>>()?;
    Ok(BenchmarkReport {
        n: points.len(),
        grid_pairs: grid.weight_pairs().len(),
        grid_evaluations: fit.evaluations,
        grid_seconds,
        grid_objective: fit.objective,
        svm_seconds,
        svm_iterations: model.iterations,
        svm_converged: model.converged,
        svm_support_vectors: model.support_vectors.len(),
        svm_objective: Objective::WeightedF1.eval(&Confusion::from_labels(labels, &predicted)),
    })
}

/// Normalized component triples with a 10% abnormal class that is only
/// partly separable along each axis.
pub fn synthetic_components(n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let abnormal = rng.random_bool(0.1);
        let centre: [f64; 3] = if abnormal { [0.55, 0.45, 0.6] } else { [0.3, 0.3, 0.3] };
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = (centre[k] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        points.push(p);
        labels.push(abnormal);
    }
    (points, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn comp(id: usize, r: f64, d: f64, l: f64, abnormal: bool) -> ErrorComponents {
        ErrorComponents {
            sample_id: id.to_string(),
            r,
            d,
            l,
            z_norm: l.abs(),
            label: Some(if abnormal { Label::Abnormal } else { Label::Normal }),
        }
    }

    fn toy() -> Vec<ErrorComponents> {
        (0..40).map(|i| comp(i, if i % 4 == 0 { 2.0 } else { 1.0 } + 0.01 * i as f64, 0.5 + 0.001 * i as f64, -0.2, i % 4 == 0)).collect()
    }

    #[test]
    fn lambda0_matches_reconstruction_threshold() {
        let comps = toy();
        let m = fit_composer(&ComposerSpec::lambda0(), &comps).unwrap();
        let report = m.decide(&comps).unwrap();
        let c = report.confusion.unwrap();
        assert_eq!(c.total(), 40);
        assert_eq!((c.fp, c.fn_), (0, 0));
        let Composition::Linear { tau, .. } = m.composition else { panic!() };
        for (s, comp) in report.scores.iter().zip(&comps) {
            let r_norm = m.normalizer.transform(&[comp.r, comp.d, comp.l.abs()])[0];
            assert_eq!(*s, r_norm);
            assert_eq!(*s > tau, comp.is_abnormal().unwrap());
        }
        let above = CompositionModel { composition: Composition::Linear { lambda: 0.0, gamma: 0.0, tau: 2.0 }, ..m.clone() };
        assert!(above.decide(&comps).unwrap().predicted.iter().all(|p| !p));
    }

    #[test]
    fn composition_json_round_trip() {
        let comps = toy();
        let dir = tempfile::tempdir().unwrap();
        for (name, spec) in default_composers() {
            let m = fit_composer(&spec, &comps).unwrap();
            let p = dir.path().join(format!("{name}.json"));
            m.save(&p).unwrap();
            assert_eq!(CompositionModel::load(&p).unwrap(), m);
        }
    }

    #[test]
    fn unlabelled_fit_is_rejected() {
        let mut comps = toy();
        comps[3].label = None;
        assert!(fit_composer(&ComposerSpec::lambda_grid(), &comps).is_err());
    }

    #[test]
    fn small_benchmark_is_fast() {
        let (pts, labels) = synthetic_components(10, 1);
        let mut labels = labels;
        labels[..2].copy_from_slice(&[true, true]);
        labels[2..4].copy_from_slice(&[false, false]);
        let r = benchmark_search(&pts, &labels, &LinearGrid::default(), FeatureSet::Rdl, &SvmConfig::default()).unwrap();
        assert!(r.grid_seconds < 1.0 && r.svm_seconds < 1.0);
        assert!(r.grid_seconds >= 0.0 && r.svm_seconds >= 0.0);
        assert_eq!(r.n, 10);
        assert_eq!(r.grid_pairs, 101);
    }

    #[test]
    fn spec_json_defaults() {
        let s: ComposerSpec = serde_json::from_str(r#"{"kind":"svm","feature_set":"rdl"}"#).unwrap();
        assert_eq!(s, ComposerSpec::svm_gamma());
        let s: ComposerSpec = serde_json::from_str(r#"{"kind":"linear"}"#).unwrap();
        assert_eq!(s, ComposerSpec::lambda_grid());
    }
}
