use anodae_core::composer::{LinearGrid, Objective};
use anodae_core::data::synthetic::{generate, SyntheticConfig};
use anodae_core::data::normalize_minmax;
use anodae_core::metrics::{
    auroc, chi_cdf, chi_fit, lambda_trajectory, phi_coefficient, tstr_measure, weighted_f1, ClassifierConfig, Confusion,
    TstrReport,
};
use anodae_core::scoring::{empirical_mode, latent_score, LatentStyle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use statrs::function::gamma::ln_gamma;

fn gaussian_norms(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// O(n^2) Mann-Whitney: fraction of (abnormal, normal) pairs ranked
/// correctly, ties counting half.
fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// sklearn-style weighted F1 from label pairs, class by class.
fn brute_weighted_f1(truth: &[bool], pred: &[bool]) -> f64 {
    let n = truth.len() as f64;
    let mut total = 0.0;
    for class in [false, true] {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == class && **p == class).count() as f64;
        let predicted = pred.iter().filter(|p| **p == class).count() as f64;
        let actual = truth.iter().filter(|t| **t == class).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        total += f1 * actual / n;
    }
    total
}

/// Pearson correlation of the two 0/1 vectors.
fn brute_phi(truth: &[bool], pred: &[bool]) -> f64 {
    let n = truth.len() as f64;
    let a: Vec<f64> = truth.iter().map(|&b| f64::from(u8::from(b))).collect();
    let b: Vec<f64> = pred.iter().map(|&b| f64::from(u8::from(b))).collect();
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn metrics_match_independent_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.random_range(2..200);
        let p_pos = rng.random_range(0.05..0.95);
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(p_pos)).collect();
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
        let c = Confusion::from_labels(&truth, &pred);
        assert!((weighted_f1(&c) - brute_weighted_f1(&truth, &pred)).abs() < 1e-12, "case {case}");
        assert!((phi_coefficient(&c) - brute_phi(&truth, &pred)).abs() < 1e-12, "case {case}");
        if truth.iter().any(|&t| t) && truth.iter().any(|&t| !t) {
            let a = auroc(&scores, &truth).unwrap();
            assert!((a - pair_count_auroc(&scores, &truth)).abs() < 1e-12, "case {case}");
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            assert!((auroc(&neg, &truth).unwrap() - (1.0 - a)).abs() < 1e-15);
        }
    }
}

#[test]
fn metrics_ignore_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = 50;
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let t2: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
        let p2: Vec<bool> = idx.iter().map(|&i| pred[i]).collect();
        let (a, b) = (Confusion::from_labels(&truth, &pred), Confusion::from_labels(&t2, &p2));
        assert_eq!(weighted_f1(&a), weighted_f1(&b));
        assert_eq!(phi_coefficient(&a), phi_coefficient(&b));
    }
}

#[test]
fn random_predictions_have_no_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let truth: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
    let pred: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
    assert!(phi_coefficient(&Confusion::from_labels(&truth, &pred)).abs() < 0.05);
}

/// Regularized lower incomplete gamma by its power series (x < a + 1) or
/// by the Lentz continued fraction for the upper tail.
fn gamma_p_oracle(a: f64, x: f64) -> f64 {
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        for n in 1..10_000 {
            term *= x / (a + n as f64);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        sum * log_prefix.exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - log_prefix.exp() * h
    }
}

#[test]
fn chi_cdf_matches_incomplete_gamma_oracle() {
    for k in [1.0, 2.0, 3.0, 6.0, 10.0, 37.5, 101.0] {
        for i in 1..200 {
            let x = i as f64 * 0.08;
            let expected = gamma_p_oracle(k / 2.0, x * x / 2.0);
            let got = chi_cdf(x, k);
            assert!((got - expected).abs() < 1e-12, "k {k} x {x}: {got} vs {expected}");
        }
    }
}

#[test]
fn gaussian_norms_fit_chi6() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let norms = gaussian_norms(10_000, 6, &mut rng);
    let hinted = chi_fit(&norms, Some(6)).unwrap();
    assert!(hinted.p_value > 0.01, "p = {}", hinted.p_value);
    assert!((0.0..=1.0).contains(&hinted.ks_statistic));
    let fitted = chi_fit(&norms, None).unwrap();
    assert!(fitted.dof_fitted);
    assert!((fitted.dof - 6.0).abs() < 0.2, "fitted dof {}", fitted.dof);
    assert!(fitted.p_value > 0.01);
}

#[test]
fn uniform_norms_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let u = Uniform::new(1e-9, 1.0).unwrap();
    let norms: Vec<f64> = (0..10_000).map(|_| u.sample(&mut rng)).collect();
    let r = chi_fit(&norms, Some(6)).unwrap();
    assert!(r.p_value < 1e-6, "p = {}", r.p_value);
}

#[test]
fn ks_test_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut rejections = 0;
    for _ in 0..100 {
        let norms = gaussian_norms(10_000, 6, &mut rng);
        if chi_fit(&norms, Some(6)).unwrap().p_value < 0.01 {
            rejections += 1;
        }
    }
    assert!(rejections < 5, "{rejections} rejections in 100");
}

#[test]
fn empirical_mode_finds_the_chi_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let norms = gaussian_norms(100_000, 6, &mut rng);
    let m = empirical_mode(&norms, 100).unwrap();
    assert!((m - 5f64.sqrt()).abs() < 0.1, "mode {m}");
    let norms = gaussian_norms(1_000_000, 101, &mut rng);
    let m = empirical_mode(&norms, 100).unwrap();
    assert!((m - 10.0).abs() < 0.1, "mode {m}");
}

#[test]
fn fixed_chi_score_mean_matches_chi_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let n = 100_000;
    let mean: f64 = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            latent_score(&z, 0.0, LatentStyle::FixedChi)
        })
        .sum::<f64>()
        / n as f64;
    // E[chi_k] = sqrt 2 * Gamma((k+1)/2) / Gamma(k/2)
    let expected = 2f64.sqrt() * (ln_gamma(3.5) - ln_gamma(3.0)).exp() - 5f64.sqrt();
    assert!((expected - 0.114).abs() < 1e-3);
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
}

fn real_set(n_normal: usize, n_abnormal: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let ds = generate(&SyntheticConfig { normal: n_normal, abnormal: n_abnormal, seq_len: 160, seed, ..Default::default() }).unwrap();
    let ds = normalize_minmax(&ds).unwrap().0;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (
        idx.iter().map(|&i| ds.samples[i].values.clone()).collect(),
        idx.iter().map(|&i| ds.samples[i].label.is_abnormal()).collect(),
    )
}

#[test]
fn tstr_on_real_data_normalizes_to_one() {
    let (x, y) = real_set(800, 200, 31);
    let (tx, ex) = x.split_at(500);
    let (ty, ey) = y.split_at(500);
    let cfg = ClassifierConfig::default();
    let m = tstr_measure(1, tx, tx, ty, ex, ey, &cfg, 3).unwrap();
    let report = TstrReport::new(vec![m], 5);
    assert_eq!(report.tstr_n, Some(1.0));
    assert!(report.baseline.unwrap() > 0.8, "baseline {:?}", report.baseline);
}

#[test]
fn tstr_on_noise_falls_to_the_majority_floor() {
    let (x, y) = real_set(800, 200, 32);
    let (tx, ex) = x.split_at(500);
    let (ty, ey) = y.split_at(500);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<Vec<f64>> = tx.iter().map(|r| r.iter().map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let m = tstr_measure(1, &noise, tx, ty, ex, ey, &ClassifierConfig::default(), 3).unwrap();
    let abnormal = ey.iter().filter(|&&v| v).count() as f64 / ey.len() as f64;
    // the all-normal predictor's weighted F1
    let majority = (1.0 - abnormal) * 2.0 * (1.0 - abnormal) / (2.0 - abnormal);
    let tstr = m.tstr.unwrap();
    eprintln!("noise TSTR {tstr:.3}, majority floor {majority:.3}, baseline {:.3}", m.baseline.unwrap());
    assert!(tstr < m.baseline.unwrap() - 0.1);
    assert!(tstr < majority + 0.1);
}

#[test]
fn trajectory_domain_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let raw: Vec<[f64; 3]> = (0..200).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..2.0)]).collect();
    let labels: Vec<bool> = raw.iter().map(|p| p[0] + 0.5 * p[1] > 0.9).collect();
    let epochs: Vec<_> = [5, 10, 15].iter().map(|&e| (e, raw.clone(), labels.clone())).collect();
    let traj = lambda_trajectory(&epochs, &LinearGrid::lambda_gamma(), Objective::WeightedF1).unwrap();
    assert_eq!(traj.len(), 3);
    for p in &traj {
        assert!((0.0..=1.0).contains(&p.lambda) && (0.0..=1.0).contains(&p.gamma));
        assert!(p.lambda + p.gamma <= 1.0 + 1e-9);
        assert_eq!((p.lambda, p.gamma, p.tau), (traj[0].lambda, traj[0].gamma, traj[0].tau));
    }
    assert_eq!(traj.iter().map(|p| p.epoch).collect::<Vec<_>>(), vec![5, 10, 15]);
    assert!(lambda_trajectory(&epochs[..1], &LinearGrid::default(), Objective::WeightedF1).is_err());
}
