//! Demographic disparity estimation from branch-wise prevalence estimates.
//!
//! The test set is split by the predictions of `h`; the prevalence of the
//! sensitive class in each branch is estimated by a quantifier fitted on the
//! matching branch of the auxiliary set, smoothed toward that branch's
//! observed prevalence, and inverted into per-group acceptance rates.

use serde::{Deserialize, Serialize};

use crate::data::{
    BranchPrevalence, DdEstimate, FeatureMatrix, LabelKind, LabeledSample, NEGATIVE, POSITIVE,
};
use crate::error::{Error, Result};
use crate::linear::LinearModel;
use crate::quantify::{fit_many, Method, Quantifier, QuantifierConfig};
use crate::seeding;

pub const DEFAULT_PSEUDOCOUNT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdPipelineConfig {
    pub method: Method,
    /// `false` fits a single quantifier on the whole auxiliary set.
    #[serde(default = "yes")]
    pub split_by_prediction: bool,
    #[serde(default = "default_pseudocount")]
    pub laplace_pseudocount: f64,
    #[serde(default)]
    pub quantifier: QuantifierConfig,
}

fn yes() -> bool {
    true
}

fn default_pseudocount() -> f64 {
    DEFAULT_PSEUDOCOUNT
}

impl DdPipelineConfig {
    pub fn new(method: Method) -> Self {
        DdPipelineConfig {
            method,
            split_by_prediction: true,
            laplace_pseudocount: DEFAULT_PSEUDOCOUNT,
            quantifier: QuantifierConfig::default(),
        }
    }

    pub fn ablated(mut self) -> Self {
        self.split_by_prediction = false;
        self
    }

    /// Label used in records, e.g. `SLD` or `SLD-nosD2`.
    pub fn label(&self) -> String {
        if self.split_by_prediction {
            self.method.name().to_string()
        } else {
            format!("{}-nosD2", self.method.name())
        }
    }
}

/// `(p̂·n + c·α·2) / (n + α·2)`; with `α = ½` this is `(p̂·n + c)/(n + 1)`.
pub fn laplace_smooth_with(p_hat: f64, n: usize, control: f64, pseudocount: f64) -> f64 {
    let n = n as f64;
    let k = 2.0 * pseudocount;
    if n + k == 0.0 {
        return control;
    }
    (p_hat * n + control * k) / (n + k)
}

/// Smoothing with pseudocount `½` over the two sensitive classes.
pub fn laplace_smooth(p_hat: f64, n: usize, control: f64) -> f64 {
    laplace_smooth_with(p_hat, n, control, DEFAULT_PSEUDOCOUNT)
}

/// Quantifiers fitted on the auxiliary set, one per prediction branch (or a
/// shared one when ablated), with the control prevalences used for
/// smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchQuantifiers {
    pub positive: Quantifier,
    pub negative: Quantifier,
    /// Observed `Pr(S=1)` in the auxiliary `⊕` and `⊖` branches.
    pub control: [f64; 2],
    pub shared: bool,
}

/// Instances of `sample` predicted `⊕` and `⊖` by `h`.
pub fn split_by_prediction(predictions: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &p) in predictions.iter().enumerate() {
        if p == POSITIVE {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    (pos, neg)
}

fn branch_sample(d2: &LabeledSample, idx: &[usize], which: &'static str) -> Result<LabeledSample> {
    d2.subset(idx).ok_or(Error::BranchDegeneracy(which))
}

/// Fits branch quantifiers for several methods on the auxiliary set `d2`.
/// `split` selects dual quantifiers (`true`) or one shared quantifier.
pub fn fit_branch_quantifiers(
    methods: &[Method],
    h: &LinearModel,
    d2: &LabeledSample,
    split: bool,
    config: &QuantifierConfig,
    seed: u64,
) -> Result<Vec<BranchQuantifiers>> {
    d2.require(LabelKind::Sensitive)?;
    if !split {
        return fit_shared(methods, d2, config, seed);
    }
    let preds = h.predict(&d2.features, 0.5)?;
    let (pos_idx, neg_idx) = split_by_prediction(&preds);
    let pos = branch_sample(d2, &pos_idx, "positive")?;
    let neg = branch_sample(d2, &neg_idx, "negative")?;
    fit_dual(methods, &pos, &neg, config, seed)
}

fn check_branch(part: &LabeledSample, which: &'static str) -> Result<()> {
    let c = part.class_counts(LabelKind::Sensitive)?;
    if c[0] == 0 || c[1] == 0 {
        return Err(Error::BranchDegeneracy(which));
    }
    Ok(())
}

/// Dual quantifiers on given auxiliary branches.
pub fn fit_dual(
    methods: &[Method],
    pos: &LabeledSample,
    neg: &LabeledSample,
    config: &QuantifierConfig,
    seed: u64,
) -> Result<Vec<BranchQuantifiers>> {
    check_branch(pos, "positive")?;
    check_branch(neg, "negative")?;
    let qp = fit_many(methods, pos, config, seeding::derive_seed(seed, &[seeding::tag("pos")]))?;
    let qn = fit_many(methods, neg, config, seeding::derive_seed(seed, &[seeding::tag("neg")]))?;
    let control = [
        pos.prevalence(LabelKind::Sensitive)?.value,
        neg.prevalence(LabelKind::Sensitive)?.value,
    ];
    Ok(qp
        .into_iter()
        .zip(qn)
        .map(|(positive, negative)| BranchQuantifiers {
            positive,
            negative,
            control,
            shared: false,
        })
        .collect())
}

/// One quantifier per method fitted on the whole auxiliary set and used for
/// both branches, with the whole-set prevalence as control.
pub fn fit_shared(
    methods: &[Method],
    d2: &LabeledSample,
    config: &QuantifierConfig,
    seed: u64,
) -> Result<Vec<BranchQuantifiers>> {
    let whole = d2.prevalence(LabelKind::Sensitive)?.value;
    let qs = fit_many(methods, d2, config, seeding::derive_seed(seed, &[seeding::tag("all")]))?;
    Ok(qs
        .into_iter()
        .map(|q| BranchQuantifiers {
            positive: q.clone(),
            negative: q,
            control: [whole, whole],
            shared: true,
        })
        .collect())
}

/// Raw estimate for one test branch, before smoothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchInput {
    /// Estimated `Pr(S=1)`; `None` for an empty branch.
    pub raw: Option<f64>,
    pub size: usize,
    pub control: f64,
}

/// Smooths both branch estimates and turns them into acceptance rates.
pub fn combine_branches(pos: BranchInput, neg: BranchInput, pseudocount: f64) -> DdEstimate {
    let mut flags = Vec::new();
    let smooth = |b: BranchInput, name: &str, flags: &mut Vec<String>| -> BranchPrevalence {
        let (raw, smoothed) = match b.raw {
            Some(r) => (r, laplace_smooth_with(r, b.size, b.control, pseudocount)),
            None => {
                flags.push(format!("empty-{name}-branch"));
                (b.control, b.control)
            }
        };
        BranchPrevalence {
            raw,
            smoothed: smoothed.clamp(0.0, 1.0),
            control: b.control,
            size: b.size,
        }
    };
    let positive_branch = smooth(pos, "positive", &mut flags);
    let negative_branch = smooth(neg, "negative", &mut flags);
    let total = pos.size + neg.size;
    let pr_pos = if total == 0 {
        0.0
    } else {
        pos.size as f64 / total as f64
    };
    let mu = |s: u8, flags: &mut Vec<String>| -> f64 {
        let a = positive_branch.smoothed_for(s) * pr_pos;
        let b = negative_branch.smoothed_for(s) * (1.0 - pr_pos);
        if a + b > 0.0 {
            (a / (a + b)).clamp(0.0, 1.0)
        } else {
            flags.push(format!("degenerate-mu{s}"));
            pr_pos
        }
    };
    let mu1 = mu(POSITIVE, &mut flags);
    let mu0 = mu(NEGATIVE, &mut flags);
    DdEstimate {
        mu1,
        mu0,
        delta: mu1 - mu0,
        positive_branch,
        negative_branch,
        pr_pos,
        flags,
    }
}

fn quantify_branch(q: &Quantifier, features: Option<&FeatureMatrix>, control: f64, size: usize) -> Result<(BranchInput, Vec<String>)> {
    match features {
        Some(x) => {
            let est = q.quantify(x)?;
            Ok((BranchInput { raw: Some(est.value()), size, control }, est.flags))
        }
        None => Ok((BranchInput { raw: None, size: 0, control }, Vec::new())),
    }
}

/// Estimates demographic disparity on the test branches with fitted branch
/// quantifiers.
pub fn estimate_with(
    bq: &BranchQuantifiers,
    test_pos: Option<&FeatureMatrix>,
    test_neg: Option<&FeatureMatrix>,
    pseudocount: f64,
) -> Result<DdEstimate> {
    let n_pos = test_pos.map_or(0, FeatureMatrix::rows);
    let n_neg = test_neg.map_or(0, FeatureMatrix::rows);
    if n_pos + n_neg == 0 {
        return Err(Error::EmptySample);
    }
    let (pos, mut f1) = quantify_branch(&bq.positive, test_pos, bq.control[0], n_pos)?;
    let (neg, f2) = quantify_branch(&bq.negative, test_neg, bq.control[1], n_neg)?;
    let mut est = combine_branches(pos, neg, pseudocount);
    f1.extend(f2);
    f1.extend(bq.positive.flags.iter().cloned());
    if !bq.shared {
        f1.extend(bq.negative.flags.iter().cloned());
    }
    f1.append(&mut est.flags);
    f1.sort();
    f1.dedup();
    est.flags = f1;
    Ok(est)
}

/// Splits `features` by the predictions of `h`.
pub fn split_features(
    h: &LinearModel,
    features: &FeatureMatrix,
) -> Result<(Option<FeatureMatrix>, Option<FeatureMatrix>)> {
    let preds = h.predict(features, 0.5)?;
    let (pos, neg) = split_by_prediction(&preds);
    Ok((features.select(&pos), features.select(&neg)))
}

/// Full pipeline: split, fit branch quantifiers on `d2`, quantify the test
/// branches of `d3` and combine. Only the features of the test set are
/// read.
pub fn estimate_dd(
    h: &LinearModel,
    d2: &LabeledSample,
    d3: &FeatureMatrix,
    config: &DdPipelineConfig,
    seed: u64,
) -> Result<DdEstimate> {
    if config.laplace_pseudocount < 0.0 {
        return Err(Error::InvalidSpec("negative pseudocount".into()));
    }
    let bq = fit_branch_quantifiers(
        &[config.method],
        h,
        d2,
        config.split_by_prediction,
        &config.quantifier,
        seed,
    )?
    .remove(0);
    let (pos, neg) = split_features(h, d3)?;
    estimate_with(&bq, pos.as_ref(), neg.as_ref(), config.laplace_pseudocount)
}

/// `Pr(ŷ=⊕|S=1) − Pr(ŷ=⊕|S=0)` from predictions and group labels.
pub fn disparity(predictions: &[u8], sensitive: &[u8]) -> Result<f64> {
    if predictions.len() != sensitive.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: sensitive.len(),
            got: predictions.len(),
        });
    }
    let mut acc = [[0usize; 2]; 2];
    for (&p, &s) in predictions.iter().zip(sensitive) {
        acc[usize::from(s)][usize::from(p)] += 1;
    }
    let rate = |s: usize| -> Result<f64> {
        let n = acc[s][0] + acc[s][1];
        if n == 0 {
            return Err(Error::EmptyGroup(s as u8));
        }
        Ok(acc[s][1] as f64 / n as f64)
    };
    Ok(rate(1)? - rate(0)?)
}

/// True demographic disparity of `h` on a sample with sensitive labels.
pub fn true_dd(h: &LinearModel, d3: &LabeledSample) -> Result<f64> {
    let s = d3.require(LabelKind::Sensitive)?;
    disparity(&h.predict(&d3.features, 0.5)?, s)
}

/// Weighted estimator `Σ_{ŷ=⊕} π_s / Σ π_s` with branch-specific posteriors
/// (`posteriors[i]` is the posterior of `s = 1` from the quantifier of
/// instance `i`'s branch).
pub fn weighted_estimator(predictions: &[u8], posteriors: &[f64], s: u8) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&p, &pi) in predictions.iter().zip(posteriors) {
        let w = if s == POSITIVE { pi } else { 1.0 - pi };
        den += w;
        if p == POSITIVE {
            num += w;
        }
    }
    num / den
}

/// Threshold estimator: the weighted estimator with hard memberships.
pub fn threshold_estimator(predictions: &[u8], memberships: &[u8], s: u8) -> f64 {
    let (mut num, mut den) = (0usize, 0usize);
    for (&p, &k) in predictions.iter().zip(memberships) {
        if k == s {
            den += 1;
            if p == POSITIVE {
                num += 1;
            }
        }
    }
    num as f64 / den as f64
}

/// Confusion counts for binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(truth: &[u8], predicted: &[u8]) -> Confusion {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t == POSITIVE, p == POSITIVE) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }

    /// F1 score; `1` when there are no positives, predicted or actual.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }
}

/// Quantification error and classification quality on one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecouplingMetrics {
    pub abs_error: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// `|p̂ − p|` on the branch together with accuracy and F1 of the method's
/// individual-level sensitive labels.
pub fn decoupling_metrics(q: &Quantifier, branch: &LabeledSample) -> Result<DecouplingMetrics> {
    if branch.is_empty() {
        return Err(Error::EmptySample);
    }
    let truth = branch.require(LabelKind::Sensitive)?;
    let labels = q.individual_labels(&branch.features)?;
    let estimate = q.quantify(&branch.features)?.value();
    let actual = branch.prevalence(LabelKind::Sensitive)?.value;
    let c = Confusion::tally(truth, &labels);
    Ok(DecouplingMetrics {
        abs_error: (estimate - actual).abs(),
        accuracy: c.accuracy(),
        f1: c.f1(),
    })
}
