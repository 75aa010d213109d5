#![allow(dead_code)]

use qfair::data::{FeatureMatrix, LabeledSample};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Labels in `sensitive` and `target` both set to `labels`.
pub fn sample(rows: &[Vec<f64>], labels: &[u8]) -> LabeledSample {
    LabeledSample::new(
        FeatureMatrix::from_rows(rows).unwrap(),
        Some(labels.to_vec()),
        Some(labels.to_vec()),
    )
    .unwrap()
}

/// Unit-variance Gaussian classes centred at `±mean` in every dimension,
/// class 1 with probability `p`.
pub fn gaussian_classes(n: usize, dim: usize, mean: f64, p: f64, seed: u64) -> LabeledSample {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = u8::from(r.gen::<f64>() < p);
        let m = if y == 1 { mean } else { -mean };
        let row: Vec<f64> = (0..dim)
            .map(|_| m + { let z: f64 = StandardNormal.sample(&mut r); z })
            .collect();
        rows.push(row);
        labels.push(y);
    }
    sample(&rows, &labels)
}

/// Exactly `n1` class-1 and `n0` class-0 instances from the same Gaussian
/// classes as [`gaussian_classes`].
pub fn gaussian_counts(n1: usize, n0: usize, dim: usize, mean: f64, seed: u64) -> LabeledSample {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (count, y) in [(n1, 1u8), (n0, 0u8)] {
        let m = if y == 1 { mean } else { -mean };
        for _ in 0..count {
            rows.push((0..dim).map(|_| m + { let z: f64 = StandardNormal.sample(&mut r); z }).collect());
            labels.push(y);
        }
    }
    sample(&rows, &labels)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

use qfair::fairness::{
    estimate_dd, fit_branch_quantifiers, threshold_estimator, weighted_estimator, DdPipelineConfig,
};
use qfair::ingest::{generate_synthetic, SyntheticSpec};
use qfair::linear::TrainerConfig;
use qfair::quantify::Method;
use qfair::data::LabelKind;

/// Largest absolute gap between the pipeline (pseudocount 0) and the
/// closed-form weighted (PCC) and threshold (CC) estimators on one random
/// instance. `None` when the instance leaves a branch without both
/// sensitive classes or a test branch empty.
pub fn equivalence_gaps(seed: u64) -> Option<(f64, f64)> {
    let mut r = rng(seed);
    let mut probs = [0.0; 4];
    for p in probs.iter_mut() {
        *p = r.gen_range(0.1..1.0);
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let spec = SyntheticSpec::separated(
        600,
        r.gen_range(2..5),
        probs,
        r.gen_range(0.5..2.5),
        r.gen_range(0.5..2.5),
        seed,
    );
    let data = generate_synthetic(&spec).ok()?;
    let part = |lo: usize, hi: usize| data.subset(&(lo..hi).collect::<Vec<_>>()).unwrap();
    let (d1, d2, d3) = (part(0, 200), part(200, 400), part(400, 600));
    let h = TrainerConfig::default().balanced().train(&d1, LabelKind::Target, seed).ok()?.model;
    let preds = h.predict(&d3.features, 0.5).unwrap();
    if preds.iter().all(|&p| p == 1) || preds.iter().all(|&p| p == 0) {
        return None;
    }

    let mut gaps = [0.0f64; 2];
    for (slot, method) in [Method::Pcc, Method::Cc].into_iter().enumerate() {
        let mut config = DdPipelineConfig::new(method);
        config.laplace_pseudocount = 0.0;
        let est = estimate_dd(&h, &d2, &d3.features, &config, seed).ok()?;

        // refit the same branch quantifiers and apply the closed forms
        let bq = fit_branch_quantifiers(&[method], &h, &d2, true, &config.quantifier, seed)
            .ok()?
            .remove(0);
        let mut posteriors = Vec::with_capacity(preds.len());
        let mut memberships = Vec::with_capacity(preds.len());
        for (i, &p) in preds.iter().enumerate() {
            let q = if p == 1 { &bq.positive } else { &bq.negative };
            let x = FeatureMatrix::from_rows(&[d3.features.row(i).to_vec()]).unwrap();
            let m = q.model.as_ref().unwrap();
            posteriors.push(m.posterior(&x).unwrap()[0]);
            memberships.push(m.predict(&x, 0.5).unwrap()[0]);
        }
        let (mu1, mu0) = match method {
            Method::Pcc => (
                weighted_estimator(&preds, &posteriors, 1),
                weighted_estimator(&preds, &posteriors, 0),
            ),
            _ => (
                threshold_estimator(&preds, &memberships, 1),
                threshold_estimator(&preds, &memberships, 0),
            ),
        };
        if !(mu1.is_finite() && mu0.is_finite()) {
            return None;
        }
        gaps[slot] = (est.mu1 - mu1).abs().max((est.mu0 - mu0).abs()).max((est.delta - (mu1 - mu0)).abs());
    }
    Some((gaps[0], gaps[1]))
}
