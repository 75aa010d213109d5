//! Prevalence estimators for the sensitive class `s = 1`.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabelKind, LabeledSample, Prevalence, POSITIVE};
use crate::error::{Error, Result};
use crate::linear::{
    crossval_posteriors, threshold_posteriors, LinearModel, OutOfFold, RateEstimates,
    TrainerConfig, DEFAULT_FOLDS,
};
use crate::seeding;

pub const SLD_TOLERANCE: f64 = 1e-4;
pub const SLD_MAX_ITER: usize = 1000;
pub const HDY_BINS: [usize; 11] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110];
pub const HDY_ALPHA_STEPS: usize = 100;
const DEGENERATE_RATES: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "PCC")]
    Pcc,
    #[serde(rename = "ACC")]
    Acc,
    #[serde(rename = "PACC")]
    Pacc,
    #[serde(rename = "SLD")]
    Sld,
    #[serde(rename = "HDy")]
    Hdy,
    #[serde(rename = "MLPE")]
    Mlpe,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Cc,
        Method::Pcc,
        Method::Acc,
        Method::Pacc,
        Method::Sld,
        Method::Hdy,
        Method::Mlpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cc => "CC",
            Method::Pcc => "PCC",
            Method::Acc => "ACC",
            Method::Pacc => "PACC",
            Method::Sld => "SLD",
            Method::Hdy => "HDy",
            Method::Mlpe => "MLPE",
        }
    }

    /// Whether the method trains a classifier on all of the training data.
    fn uses_full_model(self) -> bool {
        !matches!(self, Method::Hdy | Method::Mlpe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

/// Options shared by all quantifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantifierConfig {
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default = "default_folds")]
    pub k_folds: usize,
    /// Fraction of the training data held out for HDy's validation
    /// distributions.
    #[serde(default = "default_hdy_holdout")]
    pub hdy_holdout: f64,
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_hdy_holdout() -> f64 {
    0.4
}

impl Default for QuantifierConfig {
    fn default() -> Self {
        QuantifierConfig {
            trainer: TrainerConfig::default(),
            k_folds: DEFAULT_FOLDS,
            hdy_holdout: 0.4,
        }
    }
}

/// Posteriors of held-out positives and negatives used by HDy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdyValidation {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// A fitted prevalence estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantifier {
    pub method: Method,
    pub model: Option<LinearModel>,
    pub rates: Option<RateEstimates>,
    pub train_prevalence: Prevalence,
    pub hdy_validation: Option<HdyValidation>,
    /// Non-fatal conditions met while fitting.
    pub flags: Vec<String>,
}

/// A prevalence estimate with any flags raised while computing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub prevalence: Prevalence,
    pub flags: Vec<String>,
}

impl Estimate {
    fn plain(value: f64, support: usize) -> Self {
        Estimate {
            prevalence: Prevalence::new(value, support),
            flags: Vec::new(),
        }
    }

    pub fn value(&self) -> f64 {
        self.prevalence.value
    }
}

/// State of the EM loop after it stops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SldTrace {
    pub iterations: usize,
    /// `|p(t) - p(t-1)|` at the last iteration.
    pub final_shift: f64,
    /// Prevalence after each iteration, starting with the training value.
    pub prevalence_path: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SldOutcome {
    pub estimate: Estimate,
    pub trace: SldTrace,
    /// EM-adjusted posteriors of `s = 1`.
    pub posteriors: Vec<f64>,
}

fn model_seed(seed: u64) -> u64 {
    seeding::derive_seed(seed, &[seeding::tag("model")])
}

fn cv_seed(seed: u64) -> u64 {
    seeding::derive_seed(seed, &[seeding::tag("rates")])
}

fn hdy_seed(seed: u64) -> u64 {
    seeding::derive_seed(seed, &[seeding::tag("hdy")])
}

fn check_fit_input(train: &LabeledSample) -> Result<Prevalence> {
    let labels = train.require(LabelKind::Sensitive)?;
    if labels.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(Prevalence::from_labels(labels))
}

/// Fits one quantifier on the sensitive labels of `train`.
pub fn fit(method: Method, train: &LabeledSample, config: &QuantifierConfig, seed: u64) -> Result<Quantifier> {
    let mut all = fit_many(&[method], train, config, seed)?;
    Ok(all.remove(0))
}

/// Fits several quantifiers at once. Methods that use the same classifier
/// share a single trained model and a single cross-validation run, so the
/// result equals fitting each method separately with the same seed.
pub fn fit_many(
    methods: &[Method],
    train: &LabeledSample,
    config: &QuantifierConfig,
    seed: u64,
) -> Result<Vec<Quantifier>> {
    let train_prevalence = check_fit_input(train)?;
    let needs_model = methods.iter().any(|m| m.uses_full_model());
    let model = if needs_model {
        let fit = config.trainer.train(train, LabelKind::Sensitive, model_seed(seed))?;
        Some(fit.model)
    } else {
        None
    };
    let needs_cv = methods.iter().any(|m| matches!(m, Method::Acc | Method::Pacc));
    let oof: Option<OutOfFold> = if needs_cv {
        Some(crossval_posteriors(
            train,
            LabelKind::Sensitive,
            &config.trainer,
            config.k_folds,
            cv_seed(seed),
        )?)
    } else {
        None
    };
    let hdy = if methods.contains(&Method::Hdy) {
        Some(fit_hdy_parts(train, config, hdy_seed(seed))?)
    } else {
        None
    };

    let labels = train.require(LabelKind::Sensitive)?;
    methods
        .iter()
        .map(|&method| {
            let mut q = Quantifier {
                method,
                model: None,
                rates: None,
                train_prevalence,
                hdy_validation: None,
                flags: Vec::new(),
            };
            match method {
                Method::Cc | Method::Pcc | Method::Sld => q.model = model.clone(),
                Method::Acc | Method::Pacc => {
                    q.model = model.clone();
                    let oof = oof.as_ref().expect("cross-validation ran");
                    let rates = oof.rates(labels, method == Method::Pacc);
                    if rates.reduced {
                        q.flags.push(format!("folds-reduced-to-{}", rates.folds));
                    }
                    q.rates = Some(rates);
                }
                Method::Hdy => {
                    let (m, v) = hdy.clone().expect("hdy parts fitted");
                    q.model = Some(m);
                    q.hdy_validation = Some(v);
                }
                Method::Mlpe => {}
            }
            Ok(q)
        })
        .collect()
}

/// Trains HDy's classifier on a stratified share of the data and collects
/// posteriors of the held-out positives and negatives.
fn fit_hdy_parts(
    train: &LabeledSample,
    config: &QuantifierConfig,
    seed: u64,
) -> Result<(LinearModel, HdyValidation)> {
    let labels = train.require(LabelKind::Sensitive)?;
    let counts = train.class_counts(LabelKind::Sensitive)?;
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass(LabelKind::Sensitive.name()));
    }
    if counts[0] < 2 || counts[1] < 2 {
        return Err(Error::FoldDegeneracy(
            "HDy needs two instances of each class to hold one out".into(),
        ));
    }
    let mut rng = seeding::rng(seed);
    let mut fit_idx = Vec::new();
    let mut held = [Vec::new(), Vec::new()];
    for c in 0..2u8 {
        let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        pool.shuffle(&mut rng);
        let n = pool.len();
        let n_held = ((n as f64 * config.hdy_holdout).round() as usize).clamp(1, n - 1);
        held[usize::from(c)] = pool[..n_held].to_vec();
        fit_idx.extend_from_slice(&pool[n_held..]);
    }
    fit_idx.sort_unstable();
    let part = train.subset(&fit_idx).ok_or(Error::EmptySample)?;
    let model = config
        .trainer
        .train(&part, LabelKind::Sensitive, model_seed(seed))?
        .model;
    let posteriors_of = |idx: &Vec<usize>| -> Result<Vec<f64>> {
        let mut idx = idx.clone();
        idx.sort_unstable();
        let x = train.features.select(&idx).ok_or(Error::EmptySample)?;
        model.posterior(&x)
    };
    let validation = HdyValidation {
        positive: posteriors_of(&held[1])?,
        negative: posteriors_of(&held[0])?,
    };
    Ok((model, validation))
}

impl Quantifier {
    fn model(&self) -> Result<&LinearModel> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::NotApplicable(self.method.name().into()))
    }

    /// Posteriors of `s = 1` from the underlying classifier.
    pub fn posteriors(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        self.model()?.posterior(features)
    }

    /// Estimated prevalence of `s = 1` in the sample.
    pub fn quantify(&self, features: &FeatureMatrix) -> Result<Estimate> {
        match self.method {
            Method::Cc => quantify_cc(self, features),
            Method::Pcc => quantify_pcc(self, features),
            Method::Acc => quantify_acc(self, features),
            Method::Pacc => quantify_pacc(self, features),
            Method::Sld => Ok(quantify_sld(self, features)?.estimate),
            Method::Hdy => quantify_hdy(self, features),
            Method::Mlpe => quantify_mlpe(self, features),
        }
    }

    /// Estimated prevalence of sensitive value `s`.
    pub fn quantify_class(&self, features: &FeatureMatrix, s: u8) -> Result<f64> {
        let p = self.quantify(features)?.value();
        Ok(if s == POSITIVE { p } else { 1.0 - p })
    }

    /// Individual-level labels implied by the method: hard predictions for
    /// CC/ACC, thresholded posteriors for PCC/PACC and thresholded
    /// EM-adjusted posteriors for SLD.
    pub fn individual_labels(&self, features: &FeatureMatrix) -> Result<Vec<u8>> {
        match self.method {
            Method::Cc | Method::Acc | Method::Pcc | Method::Pacc => {
                self.model()?.predict(features, 0.5)
            }
            Method::Sld => Ok(threshold_posteriors(
                &quantify_sld(self, features)?.posteriors,
                0.5,
            )),
            Method::Hdy | Method::Mlpe => Err(Error::NotApplicable(self.method.name().into())),
        }
    }
}

fn require_method(q: &Quantifier, method: Method) -> Result<()> {
    if q.method != method {
        return Err(Error::NotApplicable(format!(
            "{} quantifier used as {}",
            q.method, method
        )));
    }
    Ok(())
}

fn nonempty(features: &FeatureMatrix) -> Result<usize> {
    match features.rows() {
        0 => Err(Error::EmptySample),
        n => Ok(n),
    }
}

fn classify_and_count(model: &LinearModel, features: &FeatureMatrix) -> Result<f64> {
    let n = nonempty(features)?;
    let ones = model
        .predict(features, 0.5)?
        .iter()
        .filter(|&&l| l == POSITIVE)
        .count();
    Ok(ones as f64 / n as f64)
}

fn mean_posterior(model: &LinearModel, features: &FeatureMatrix) -> Result<f64> {
    let n = nonempty(features)?;
    Ok(model.posterior(features)?.iter().sum::<f64>() / n as f64)
}

/// Fraction of instances the classifier assigns to `s = 1`.
pub fn quantify_cc(q: &Quantifier, features: &FeatureMatrix) -> Result<Estimate> {
    require_method(q, Method::Cc)?;
    let p = classify_and_count(q.model()?, features)?;
    Ok(Estimate::plain(p, features.rows()))
}

/// Mean posterior of `s = 1`.
pub fn quantify_pcc(q: &Quantifier, features: &FeatureMatrix) -> Result<Estimate> {
    require_method(q, Method::Pcc)?;
    let p = mean_posterior(q.model()?, features)?;
    Ok(Estimate::plain(p, features.rows()))
}

/// `(p - fpr) / (tpr - fpr)` clipped to `[0, 1]`. Falls back to `p` when
/// the rates are too close to invert.
pub fn adjust(p: f64, rates: &RateEstimates) -> (f64, bool) {
    let denom = rates.tpr - rates.fpr;
    if denom.abs() < DEGENERATE_RATES {
        (p.clamp(0.0, 1.0), true)
    } else {
        (((p - rates.fpr) / denom).clamp(0.0, 1.0), false)
    }
}

fn adjusted(q: &Quantifier, raw: f64, support: usize) -> Result<Estimate> {
    let rates = q.rates.as_ref().ok_or_else(|| Error::NotApplicable(q.method.name().into()))?;
    let (value, degenerate) = adjust(raw, rates);
    let mut est = Estimate::plain(value, support);
    if degenerate {
        est.flags.push("degenerate-rates".into());
    }
    Ok(est)
}

/// Classify-and-count corrected with cross-validated hard tpr/fpr.
pub fn quantify_acc(q: &Quantifier, features: &FeatureMatrix) -> Result<Estimate> {
    require_method(q, Method::Acc)?;
    let raw = classify_and_count(q.model()?, features)?;
    adjusted(q, raw, features.rows())
}

/// Mean posterior corrected with cross-validated soft tpr/fpr.
pub fn quantify_pacc(q: &Quantifier, features: &FeatureMatrix) -> Result<Estimate> {
    require_method(q, Method::Pacc)?;
    let raw = mean_posterior(q.model()?, features)?;
    adjusted(q, raw, features.rows())
}

/// Runs the EM prior-adjustment loop on posteriors of `s = 1` starting from
/// the training prevalence `p_train`.
pub fn sld_em(posteriors: &[f64], p_train: f64) -> (f64, SldTrace, Vec<f64>) {
    let mut trace = SldTrace {
        iterations: 0,
        final_shift: 0.0,
        prevalence_path: vec![p_train],
    };
    if p_train <= 0.0 || p_train >= 1.0 || posteriors.is_empty() {
        return (p_train, trace, posteriors.to_vec());
    }
    let n = posteriors.len() as f64;
    let mut current = posteriors.to_vec();
    let mut p = p_train;
    for t in 1..=SLD_MAX_ITER {
        let r1 = p / p_train;
        let r0 = (1.0 - p) / (1.0 - p_train);
        let mut total = 0.0;
        for (c, &p0) in current.iter_mut().zip(posteriors) {
            let a1 = r1 * p0;
            let a0 = r0 * (1.0 - p0);
            let z = a1 + a0;
            *c = if z > 0.0 { a1 / z } else { p0 };
            total += *c;
        }
        let next = total / n;
        trace.iterations = t;
        trace.final_shift = (next - p).abs();
        trace.prevalence_path.push(next);
        p = next;
        if trace.final_shift < SLD_TOLERANCE {
            break;
        }
    }
    (p, trace, current)
}

/// EM-adjusted prevalence together with the loop trace and the final
/// posteriors.
pub fn quantify_sld(q: &Quantifier, features: &FeatureMatrix) -> Result<SldOutcome> {
    require_method(q, Method::Sld)?;
    let n = nonempty(features)?;
    let posteriors = q.model()?.posterior(features)?;
    let p_train = q.train_prevalence.value;
    let (p, trace, adjusted) = sld_em(&posteriors, p_train);
    let mut estimate = Estimate::plain(p, n);
    if p_train <= 0.0 || p_train >= 1.0 {
        estimate.flags.push("degenerate-train-prevalence".into());
    } else if trace.final_shift >= SLD_TOLERANCE {
        debug!("SLD stopped at the iteration cap");
        estimate.flags.push("sld-iteration-cap".into());
    }
    Ok(SldOutcome {
        estimate,
        trace,
        posteriors: adjusted,
    })
}

/// Normalized histogram of `values` over `bins` equal-width bins on `[0, 1]`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        h[b] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Hellinger distance between two discrete distributions.
pub fn hellinger(v: &[f64], u: &[f64]) -> f64 {
    v.iter()
        .zip(u)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mixture weight on the grid `{0, 0.01, ..., 1}` minimizing the Hellinger
/// distance between `(1-α)·neg + α·pos` and `test` (first minimum wins).
pub fn best_alpha(pos: &[f64], neg: &[f64], test: &[f64]) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for step in 0..=HDY_ALPHA_STEPS {
        let alpha = step as f64 / HDY_ALPHA_STEPS as f64;
        let mix: Vec<f64> = pos
            .iter()
            .zip(neg)
            .map(|(p, n)| (1.0 - alpha) * n + alpha * p)
            .collect();
        let d = hellinger(&mix, test);
        if d < best.0 {
            best = (d, alpha);
        }
    }
    best.1
}

/// Median over bin counts of the per-bin-count best mixture weights.
pub fn hdy_estimate(validation: &HdyValidation, test: &[f64]) -> Vec<f64> {
    HDY_BINS
        .iter()
        .map(|&b| {
            best_alpha(
                &histogram(&validation.positive, b),
                &histogram(&validation.negative, b),
                &histogram(test, b),
            )
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Hellinger-distance mixture fit of validation posteriors to the sample.
pub fn quantify_hdy(q: &Quantifier, features: &FeatureMatrix) -> Result<Estimate> {
    require_method(q, Method::Hdy)?;
    let n = nonempty(features)?;
    let validation = q.hdy_validation.as_ref().ok_or(Error::MissingValidation)?;
    if validation.positive.is_empty() || validation.negative.is_empty() {
        return Err(Error::MissingValidation);
    }
    let test = q.model()?.posterior(features)?;
    Ok(Estimate::plain(median(&hdy_estimate(validation, &test)), n))
}

/// The training prevalence, whatever the sample.
pub fn quantify_mlpe(q: &Quantifier, features: &FeatureMatrix) -> Result<Estimate> {
    require_method(q, Method::Mlpe)?;
    let n = nonempty(features)?;
    Ok(Estimate::plain(q.train_prevalence.value, n))
}
