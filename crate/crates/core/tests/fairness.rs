mod common;

use common::{equivalence_gaps, gaussian_counts, rng};
use qfair::data::{FeatureMatrix, LabelKind, LabeledSample};
use qfair::fairness::*;
use qfair::ingest::{generate_synthetic, SyntheticSpec};
use qfair::linear::{LinearModel, Link, TrainerConfig};
use qfair::quantify::{fit, Method, QuantifierConfig};
use rand::Rng;

fn input(raw: f64, size: usize, control: f64) -> BranchInput {
    BranchInput { raw: Some(raw), size, control }
}

#[test]
fn pipeline_matches_weighted_and_threshold_closed_forms() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 30 {
        seed += 1;
        if let Some((we, te)) = equivalence_gaps(seed) {
            assert!(we < 1e-9, "weighted estimator gap {we} at seed {seed}");
            assert!(te < 1e-9, "threshold estimator gap {te} at seed {seed}");
            checked += 1;
        }
        assert!(seed < 300, "too many degenerate instances");
    }
}

#[test]
fn hand_built_branch_combination() {
    // |D3⊕| = 4, |D3⊖| = 6, no smoothing
    let est = combine_branches(input(0.6, 4, 0.5), input(0.3, 6, 0.5), 0.0);
    let mu1 = 0.6 * 0.4 / (0.6 * 0.4 + 0.3 * 0.6);
    let mu0 = 0.4 * 0.4 / (0.4 * 0.4 + 0.7 * 0.6);
    assert!((est.mu1 - mu1).abs() < 1e-12);
    assert!((est.mu0 - mu0).abs() < 1e-12);
    assert!((est.delta - (mu1 - mu0)).abs() < 1e-12);
    assert!((est.pr_pos - 0.4).abs() < 1e-12);
}

#[test]
fn laplace_smoothing_examples() {
    assert_eq!(laplace_smooth(0.9, 0, 0.3), 0.3);
    assert!((laplace_smooth(0.42, 17, 0.42) - 0.42).abs() < 1e-15);
    assert!((laplace_smooth(0.2, 4, 0.6) - 0.28).abs() < 1e-12);
    assert_eq!(laplace_smooth_with(0.2, 4, 0.6, 0.0), 0.2);
}

#[test]
fn empty_test_branch_falls_back_to_control() {
    let pos = BranchInput { raw: None, size: 0, control: 0.7 };
    let est = combine_branches(pos, input(0.4, 10, 0.5), 0.5);
    assert_eq!(est.positive_branch.smoothed, 0.7);
    assert!(est.flags.contains(&"empty-positive-branch".to_string()));
    assert_eq!(est.pr_pos, 0.0);
}

#[test]
fn true_branch_prevalences_recover_the_disparity() {
    let mut r = rng(4);
    for _ in 0..200 {
        let n = r.gen_range(200..2000);
        let preds: Vec<u8> = (0..n).map(|_| u8::from(r.gen::<f64>() < 0.4)).collect();
        let bias = r.gen_range(-0.3..0.3);
        let s: Vec<u8> = preds
            .iter()
            .map(|&p| u8::from(r.gen::<f64>() < 0.5 + bias * if p == 1 { 1.0 } else { -1.0 }))
            .collect();
        let Ok(truth) = disparity(&preds, &s) else { continue };
        let (pos, neg) = split_by_prediction(&preds);
        let prev = |idx: &[usize]| idx.iter().filter(|&&i| s[i] == 1).count() as f64 / idx.len() as f64;
        let control = r.gen_range(0.0..1.0);
        let est = combine_branches(
            input(prev(&pos), pos.len(), control),
            input(prev(&neg), neg.len(), control),
            DEFAULT_PSEUDOCOUNT,
        );
        let bound = 2.0 / pos.len().min(neg.len()) as f64;
        assert!((est.delta - truth).abs() <= bound, "{} vs {truth}", est.delta);
        let exact = combine_branches(
            input(prev(&pos), pos.len(), control),
            input(prev(&neg), neg.len(), control),
            0.0,
        );
        assert!((exact.delta - truth).abs() < 1e-12);
    }
}

#[test]
fn acceptance_rates_reproduce_the_branch_split() {
    let mut r = rng(5);
    for _ in 0..500 {
        let est = combine_branches(
            input(r.gen(), r.gen_range(0..50), r.gen()),
            input(r.gen(), r.gen_range(1..50), r.gen()),
            DEFAULT_PSEUDOCOUNT,
        );
        let p1 = est.positive_branch.smoothed * est.pr_pos + est.negative_branch.smoothed * (1.0 - est.pr_pos);
        let p0 = 1.0 - p1;
        if est.flags.is_empty() {
            assert!((est.mu1 * p1 + est.mu0 * p0 - est.pr_pos).abs() < 1e-9);
        }
        assert_eq!(est.delta, est.mu1 - est.mu0);
        assert!((-1.0..=1.0).contains(&est.delta));
    }
}

fn synthetic(n: usize, seed: u64) -> LabeledSample {
    generate_synthetic(&SyntheticSpec::separated(n, 4, [0.3, 0.2, 0.2, 0.3], 1.5, 2.0, seed)).unwrap()
}

#[test]
fn ablation_applies_one_quantifier_to_both_branches() {
    let d1 = synthetic(400, 1);
    let d2 = synthetic(400, 2);
    let h = TrainerConfig::default().balanced().train(&d1, LabelKind::Target, 0).unwrap().model;
    let config = QuantifierConfig::default();
    let shared = fit_branch_quantifiers(&[Method::Sld, Method::Pacc], &h, &d2, false, &config, 3).unwrap();
    let whole = d2.prevalence(LabelKind::Sensitive).unwrap().value;
    for bq in &shared {
        assert!(bq.shared);
        assert_eq!(bq.positive, bq.negative);
        assert_eq!(bq.control, [whole, whole]);
    }
    let dual = fit_branch_quantifiers(&[Method::Sld], &h, &d2, true, &config, 3).unwrap();
    assert!(!dual[0].shared);
    assert_ne!(dual[0].positive.model, dual[0].negative.model);
    assert_eq!(DdPipelineConfig::new(Method::Sld).ablated().label(), "SLD-nosD2");
}

#[test]
fn auxiliary_branch_without_both_classes_is_an_error() {
    let d1 = synthetic(400, 4);
    let h = TrainerConfig::default().balanced().train(&d1, LabelKind::Target, 0).unwrap().model;
    let d2 = synthetic(400, 5);
    let preds = h.predict(&d2.features, 0.5).unwrap();
    // drop every S=1 instance from the predicted-positive branch
    let s = d2.sensitive.as_deref().unwrap();
    let keep: Vec<usize> = (0..d2.len()).filter(|&i| !(preds[i] == 1 && s[i] == 1)).collect();
    let d2 = d2.subset(&keep).unwrap();
    let err = estimate_dd(&h, &d2, &d1.features, &DdPipelineConfig::new(Method::Cc), 0);
    assert!(err.is_err());
}

#[test]
fn true_dd_matches_a_brute_force_tally() {
    let mut r = rng(9);
    for seed in 0..20 {
        let d = synthetic(50, 100 + seed);
        let h = LinearModel {
            weights: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect(),
            bias: r.gen_range(-0.5..0.5),
            link: Link::Logistic,
            calibration: None,
        };
        let s = d.sensitive.as_deref().unwrap();
        let mut accepted = [0usize; 2];
        let mut total = [0usize; 2];
        for (i, x) in d.features.iter_rows().enumerate() {
            let z: f64 = x.iter().zip(&h.weights).map(|(a, b)| a * b).sum::<f64>() + h.bias;
            let g = usize::from(s[i]);
            total[g] += 1;
            if z >= 0.0 {
                accepted[g] += 1;
            }
        }
        let expected = accepted[1] as f64 / total[1] as f64 - accepted[0] as f64 / total[0] as f64;
        assert!((true_dd(&h, &d).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn true_dd_extremes_and_empty_groups() {
    let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let d = LabeledSample::new(x, Some(vec![0, 0, 1, 1]), None).unwrap();
    let everyone = LinearModel { weights: vec![0.0], bias: 1.0, link: Link::Logistic, calibration: None };
    assert_eq!(true_dd(&everyone, &d).unwrap(), 0.0);
    let by_group = LinearModel { weights: vec![1.0], bias: -1.5, link: Link::Logistic, calibration: None };
    assert_eq!(true_dd(&by_group, &d).unwrap(), 1.0);
    assert!(disparity(&[1, 0], &[1, 1]).is_err());
}

#[test]
fn decoupling_metrics_match_a_tally() {
    let train = gaussian_counts(60, 60, 2, 0.4, 1);
    let q = fit(Method::Cc, &train, &QuantifierConfig::default(), 0).unwrap();
    let branch = gaussian_counts(4, 6, 2, 0.4, 2);
    let m = decoupling_metrics(&q, &branch).unwrap();

    let truth = branch.sensitive.as_deref().unwrap();
    let model = q.model.as_ref().unwrap();
    let pred: Vec<u8> = branch
        .features
        .iter_rows()
        .map(|x| u8::from(x.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>() + model.bias >= 0.0))
        .collect();
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(&pred) {
        match (t, p) {
            (1, 1) => tp += 1.0,
            (0, 1) => fp += 1.0,
            (0, 0) => tn += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let accuracy = (tp + tn) / 10.0;
    let f1 = if tp + fp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let abs_error = ((tp + fp) / 10.0 - 0.4f64).abs();
    assert!((m.accuracy - accuracy).abs() < 1e-12);
    assert!((m.f1 - f1).abs() < 1e-12);
    assert!((m.abs_error - abs_error).abs() < 1e-12);
}

#[test]
fn f1_is_one_without_positives() {
    let c = Confusion::tally(&[0, 0, 0], &[0, 0, 0]);
    assert_eq!((c.accuracy(), c.f1()), (1.0, 1.0));
}

#[test]
fn decoupling_rejects_methods_without_individual_labels() {
    let train = gaussian_counts(30, 30, 2, 1.0, 3);
    for m in [Method::Hdy, Method::Mlpe] {
        let q = fit(m, &train, &QuantifierConfig::default(), 0).unwrap();
        assert!(decoupling_metrics(&q, &train).is_err());
    }
}
