//! Linear classifiers for the target classifier `h` and the sensitive
//! attribute classifier `k`/`π`.
//!
//! Logistic regression is fit by damped Newton iterations on the
//! L2-regularized, optionally class-weighted log-loss (bias unpenalized).
//! The hinge-loss SVM is fit by dual coordinate descent and calibrated with
//! Platt's sigmoid on cross-validated margins.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabelKind, LabeledSample, POSITIVE};
use crate::error::{Error, Result};
use crate::seeding;

pub const DEFAULT_FOLDS: usize = 10;
pub const LR_MAX_ITER: usize = 10_000;
pub const LR_TOLERANCE: f64 = 1e-6;
const LR_WARN_TOLERANCE: f64 = 1e-3;
const PLATT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Logistic,
    CalibratedMargin,
}

/// Platt sigmoid parameters: `p = sigmoid(a * margin + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub link: Link,
    pub calibration: Option<Calibration>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    fn check_width(&self, features: &FeatureMatrix) -> Result<()> {
        if features.cols() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: features.cols(),
            });
        }
        Ok(())
    }

    /// Raw scores `w·x + b`.
    pub fn margins(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_width(features)?;
        Ok(features
            .iter_rows()
            .map(|row| dot(&self.weights, row) + self.bias)
            .collect())
    }

    fn score_to_posterior(&self, margin: f64) -> f64 {
        match (self.link, self.calibration) {
            (Link::Logistic, _) => sigmoid(margin),
            (Link::CalibratedMargin, Some(c)) => sigmoid(c.a * margin + c.b),
            // Construction always attaches calibration to margin models.
            (Link::CalibratedMargin, None) => sigmoid(margin),
        }
    }

    /// Posterior probabilities of class 1.
    pub fn posterior(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self
            .margins(features)?
            .into_iter()
            .map(|m| self.score_to_posterior(m))
            .collect())
    }

    /// Hard labels: `1` where the posterior is at least `threshold`.
    pub fn predict(&self, features: &FeatureMatrix, threshold: f64) -> Result<Vec<u8>> {
        Ok(threshold_posteriors(&self.posterior(features)?, threshold))
    }

    /// The model predicting the opposite class with complementary posteriors.
    pub fn negated(&self) -> LinearModel {
        LinearModel {
            weights: self.weights.iter().map(|w| -w).collect(),
            bias: -self.bias,
            link: self.link,
            calibration: self.calibration,
        }
    }
}

pub fn threshold_posteriors(posteriors: &[f64], threshold: f64) -> Vec<u8> {
    posteriors.iter().map(|&p| u8::from(p >= threshold)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    #[default]
    None,
    /// Loss weights inversely proportional to class frequencies.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    #[default]
    Logistic,
    SvmPlatt,
}

/// How to train a linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(default)]
    pub kind: TrainerKind,
    /// Penalty `λ` on `‖w‖²/2`; `1.0` corresponds to unit inverse
    /// regularization.
    #[serde(default = "default_l2")]
    pub l2_strength: f64,
    #[serde(default)]
    pub class_weighting: ClassWeighting,
}

fn default_l2() -> f64 {
    1.0
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            kind: TrainerKind::Logistic,
            l2_strength: 1.0,
            class_weighting: ClassWeighting::None,
        }
    }
}

impl TrainerConfig {
    pub fn balanced(mut self) -> Self {
        self.class_weighting = ClassWeighting::Balanced;
        self
    }

    pub fn train(&self, sample: &LabeledSample, labels: LabelKind, seed: u64) -> Result<FitOutcome> {
        match self.kind {
            TrainerKind::Logistic => {
                train_logistic(sample, labels, self.class_weighting, self.l2_strength, seed)
            }
            TrainerKind::SvmPlatt => train_svm_platt(sample, labels, self.l2_strength, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    /// Stopped with a gradient norm between the tolerance and the warning
    /// threshold.
    Approximate { gradient_norm: f64 },
    /// Stopped with a large gradient norm; the model is still usable.
    NotConverged { gradient_norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: LinearModel,
    pub status: FitStatus,
    pub iterations: usize,
}

fn binary_labels(sample: &LabeledSample, kind: LabelKind) -> Result<(&[u8], [usize; 2])> {
    let labels = sample.require(kind)?;
    let counts = sample.class_counts(kind)?;
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass(kind.name()));
    }
    Ok((labels, counts))
}

/// Per-instance loss weights.
pub fn class_weights(labels: &[u8], weighting: ClassWeighting) -> Vec<f64> {
    match weighting {
        ClassWeighting::None => vec![1.0; labels.len()],
        ClassWeighting::Balanced => {
            let n = labels.len() as f64;
            let ones = labels.iter().filter(|&&l| l == POSITIVE).count() as f64;
            let w1 = n / (2.0 * ones);
            let w0 = n / (2.0 * (n - ones));
            labels
                .iter()
                .map(|&l| if l == POSITIVE { w1 } else { w0 })
                .collect()
        }
    }
}

/// Weighted L2-regularized logistic loss and its gradient at `params`
/// (`[w..., b]`).
pub fn logistic_objective(
    params: &[f64],
    features: &FeatureMatrix,
    labels: &[u8],
    weights: &[f64],
    l2: f64,
) -> (f64, Vec<f64>) {
    let d = features.cols();
    let (w, b) = params.split_at(d);
    let b = b[0];
    let mut loss = 0.5 * l2 * dot(w, w);
    let mut grad = vec![0.0; d + 1];
    for (j, g) in grad.iter_mut().take(d).enumerate() {
        *g = l2 * w[j];
    }
    for (i, row) in features.iter_rows().enumerate() {
        let z = dot(w, row) + b;
        let y = f64::from(labels[i]);
        loss += weights[i] * (softplus(z) - y * z);
        let r = weights[i] * (sigmoid(z) - y);
        for (g, x) in grad.iter_mut().zip(row) {
            *g += r * x;
        }
        grad[d] += r;
    }
    (loss, grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Weighted Hessian `Σ c σ(1-σ) x̃x̃ᵀ + λ diag(1,…,1,0)` with `x̃ = [x, 1]`.
fn logistic_hessian(
    params: &[f64],
    features: &FeatureMatrix,
    weights: &[f64],
    l2: f64,
) -> DMatrix<f64> {
    let d = features.cols();
    let p = d + 1;
    let mut h = vec![0.0; p * p];
    let (w, b) = params.split_at(d);
    let mut xt = vec![1.0; p];
    for (i, row) in features.iter_rows().enumerate() {
        let z = dot(w, row) + b[0];
        let s = sigmoid(z);
        let c = weights[i] * s * (1.0 - s);
        if c == 0.0 {
            continue;
        }
        xt[..d].copy_from_slice(row);
        for a in 0..p {
            let ca = c * xt[a];
            let base = a * p;
            for bb in a..p {
                h[base + bb] += ca * xt[bb];
            }
        }
    }
    let mut m = DMatrix::from_row_slice(p, p, &h);
    for a in 0..p {
        for bb in 0..a {
            m[(a, bb)] = m[(bb, a)];
        }
        if a < d {
            m[(a, a)] += l2;
        }
    }
    m
}

/// Trains a logistic regression on the selected labels.
///
/// Newton steps with backtracking line search until the gradient norm drops
/// below `1e-6` or `10_000` iterations. Non-convergence is reported in the
/// outcome status, not as an error.
pub fn train_logistic(
    train: &LabeledSample,
    labels: LabelKind,
    weighting: ClassWeighting,
    l2_strength: f64,
    _seed: u64,
) -> Result<FitOutcome> {
    let (y, _) = binary_labels(train, labels)?;
    let x = &train.features;
    let c = class_weights(y, weighting);
    let d = x.cols();
    let mut params = vec![0.0; d + 1];
    let (mut loss, mut grad) = logistic_objective(&params, x, y, &c, l2_strength);
    let mut iterations = 0;
    let mut grad_norm = norm(&grad);
    while grad_norm > LR_TOLERANCE && iterations < LR_MAX_ITER {
        iterations += 1;
        let mut hess = logistic_hessian(&params, x, &c, l2_strength);
        let g = DVector::from_column_slice(&grad);
        let step = loop {
            if let Some(chol) = hess.clone().cholesky() {
                break chol.solve(&g);
            }
            // Only reachable when the bias curvature underflows.
            for a in 0..=d {
                hess[(a, a)] += 1e-8;
            }
        };
        let slope = -g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p - t * s).collect();
            let (trial_loss, trial_grad) = logistic_objective(&trial, x, y, &c, l2_strength);
            if trial_loss <= loss + 1e-4 * t * slope || norm(&trial_grad) < grad_norm * 0.5 {
                params = trial;
                loss = trial_loss;
                grad = trial_grad;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad_norm = norm(&grad);
        if !accepted {
            break;
        }
    }
    let status = if grad_norm <= LR_TOLERANCE {
        FitStatus::Converged
    } else if grad_norm <= LR_WARN_TOLERANCE {
        FitStatus::Approximate {
            gradient_norm: grad_norm,
        }
    } else {
        warn!("logistic regression stopped with gradient norm {grad_norm:.3e}");
        FitStatus::NotConverged {
            gradient_norm: grad_norm,
        }
    };
    let bias = params[d];
    params.truncate(d);
    Ok(FitOutcome {
        model: LinearModel {
            weights: params,
            bias,
            link: Link::Logistic,
            calibration: None,
        },
        status,
        iterations,
    })
}

const SVM_MAX_EPOCHS: usize = 1000;
const SVM_TOLERANCE: f64 = 1e-4;

/// L1-loss (hinge) linear SVM by dual coordinate descent. The bias is an
/// extra constant feature. Returns the raw margin model and epochs used.
fn fit_hinge_svm(
    x: &FeatureMatrix,
    y: &[u8],
    indices: &[usize],
    l2_strength: f64,
    seed: u64,
) -> (Vec<f64>, f64, FitStatus, usize) {
    let d = x.cols();
    let cap = 1.0 / l2_strength;
    let sign: Vec<f64> = indices
        .iter()
        .map(|&i| if y[i] == POSITIVE { 1.0 } else { -1.0 })
        .collect();
    let qii: Vec<f64> = indices
        .iter()
        .map(|&i| dot(x.row(i), x.row(i)) + 1.0)
        .collect();
    let mut alpha = vec![0.0; indices.len()];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut rng = seeding::rng(seed);
    let mut violation = f64::INFINITY;
    let mut epochs = 0;
    while epochs < SVM_MAX_EPOCHS {
        epochs += 1;
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &k in &order {
            let row = x.row(indices[k]);
            let g = sign[k] * (dot(&w, row) + b) - 1.0;
            let pg = if alpha[k] == 0.0 {
                g.min(0.0)
            } else if alpha[k] == cap {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[k];
                alpha[k] = (old - g / qii[k]).clamp(0.0, cap);
                let delta = (alpha[k] - old) * sign[k];
                if delta != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(row) {
                        *wj += delta * xj;
                    }
                    b += delta;
                }
            }
        }
        violation = pg_max - pg_min;
        if violation <= SVM_TOLERANCE {
            break;
        }
    }
    let status = if violation <= SVM_TOLERANCE {
        FitStatus::Converged
    } else {
        FitStatus::NotConverged {
            gradient_norm: violation,
        }
    };
    (w, b, status, epochs)
}

/// Fits Platt's sigmoid `p = sigmoid(a·m + b)` to margins with the
/// regularized targets `(N₊+1)/(N₊+2)` and `1/(N₋+2)`.
pub fn fit_platt(margins: &[f64], labels: &[u8]) -> Calibration {
    let n_pos = labels.iter().filter(|&&l| l == POSITIVE).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = labels
        .iter()
        .map(|&l| if l == POSITIVE { hi } else { lo })
        .collect();
    let objective = |a: f64, b: f64| -> f64 {
        margins
            .iter()
            .zip(&targets)
            .map(|(&m, &t)| {
                let z = a * m + b;
                softplus(z) - t * z
            })
            .sum()
    };
    let mut a = 0.0;
    let mut b = ((n_pos + 1.0) / (n_neg + 1.0)).ln();
    let mut f = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&m, &t) in margins.iter().zip(&targets) {
            let p = sigmoid(a * m + b);
            let v = p * (1.0 - p);
            h11 += m * m * v;
            h22 += v;
            h21 += m * v;
            g1 += m * (p - t);
            g2 += p - t;
        }
        if g1.abs() < 1e-10 && g2.abs() < 1e-10 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut moved = false;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < f + 1e-4 * step * gd {
                a = na;
                b = nb;
                f = nf;
                moved = true;
                break;
            }
            step /= 2.0;
        }
        if !moved {
            break;
        }
    }
    Calibration { a, b }
}

/// Label-independent stratified fold assignment: one shuffle of all rows,
/// then each class is dealt round-robin over the folds in shuffled order.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seeding::rng(seed));
    let mut next = [0usize; 2];
    let mut fold = vec![0; labels.len()];
    for i in order {
        let c = usize::from(labels[i] == POSITIVE);
        fold[i] = next[c] % k;
        next[c] += 1;
    }
    fold
}

/// Trains a hinge-loss linear SVM and calibrates it with Platt's method on
/// 5-fold cross-validated margins.
pub fn train_svm_platt(
    train: &LabeledSample,
    labels: LabelKind,
    l2_strength: f64,
    seed: u64,
) -> Result<FitOutcome> {
    let (y, counts) = binary_labels(train, labels)?;
    let x = &train.features;
    let all: Vec<usize> = (0..train.len()).collect();
    let (w, b, status, epochs) = fit_hinge_svm(x, y, &all, l2_strength, seed);

    let k = PLATT_FOLDS.min(counts[0]).min(counts[1]);
    let cv_margins = if k >= 2 {
        let folds = stratified_folds(y, k, seeding::derive_seed(seed, &[seeding::tag("platt")]));
        let mut margins = vec![0.0; train.len()];
        for f in 0..k {
            let fit_idx: Vec<usize> = all.iter().copied().filter(|&i| folds[i] != f).collect();
            let (wf, bf, _, _) = fit_hinge_svm(
                x,
                y,
                &fit_idx,
                l2_strength,
                seeding::derive_seed(seed, &[seeding::tag("platt-fold"), f as u64]),
            );
            for i in all.iter().copied().filter(|&i| folds[i] == f) {
                margins[i] = dot(&wf, x.row(i)) + bf;
            }
        }
        margins
    } else {
        // Too few instances of one class to cross-validate; calibrate in-sample.
        all.iter().map(|&i| dot(&w, x.row(i)) + b).collect()
    };
    let calibration = fit_platt(&cv_margins, y);
    Ok(FitOutcome {
        model: LinearModel {
            weights: w,
            bias: b,
            link: Link::CalibratedMargin,
            calibration: Some(calibration),
        },
        status,
        iterations: epochs,
    })
}

/// Cross-validated true and false positive rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimates {
    pub tpr: f64,
    pub fpr: f64,
    /// Rates from posterior sums rather than hard counts.
    pub soft: bool,
    pub folds: usize,
    /// Whether the requested number of folds had to be reduced.
    pub reduced: bool,
}

/// Out-of-fold posteriors from stratified k-fold cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutOfFold {
    pub posteriors: Vec<f64>,
    pub folds: usize,
    pub reduced: bool,
}

impl OutOfFold {
    /// tpr/fpr from pooled out-of-fold outputs, hard (threshold 0.5) or soft.
    pub fn rates(&self, labels: &[u8], soft: bool) -> RateEstimates {
        let (mut pos_sum, mut neg_sum, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
        for (&p, &l) in self.posteriors.iter().zip(labels) {
            let v = if soft { p } else { f64::from(u8::from(p >= 0.5)) };
            if l == POSITIVE {
                pos_sum += v;
                n_pos += 1;
            } else {
                neg_sum += v;
                n_neg += 1;
            }
        }
        RateEstimates {
            tpr: pos_sum / n_pos as f64,
            fpr: neg_sum / n_neg as f64,
            soft,
            folds: self.folds,
            reduced: self.reduced,
        }
    }
}

/// Runs stratified k-fold cross-validation and returns pooled out-of-fold
/// posteriors. `k` is reduced to the smallest class count when needed so
/// every fold holds both classes.
pub fn crossval_posteriors(
    train: &LabeledSample,
    labels: LabelKind,
    trainer: &TrainerConfig,
    k_folds: usize,
    seed: u64,
) -> Result<OutOfFold> {
    let (y, counts) = binary_labels(train, labels)?;
    if k_folds < 2 {
        return Err(Error::FoldDegeneracy(format!("k = {k_folds} < 2")));
    }
    let minority = counts[0].min(counts[1]);
    if minority < 2 {
        return Err(Error::FoldDegeneracy(format!(
            "a class has only {minority} instance(s)"
        )));
    }
    let k = k_folds.min(minority);
    let folds = stratified_folds(y, k, seeding::derive_seed(seed, &[seeding::tag("cv")]));
    let mut posteriors = vec![0.0; train.len()];
    for f in 0..k {
        let fit_idx: Vec<usize> = (0..train.len()).filter(|&i| folds[i] != f).collect();
        let held_idx: Vec<usize> = (0..train.len()).filter(|&i| folds[i] == f).collect();
        let part = train
            .subset(&fit_idx)
            .ok_or_else(|| Error::FoldDegeneracy("empty training part".into()))?;
        let fold_seed = seeding::derive_seed(seed, &[seeding::tag("cv-fold"), f as u64]);
        let model = trainer.train(&part, labels, fold_seed)?.model;
        if let Some(held) = train.features.select(&held_idx) {
            for (i, p) in held_idx.iter().zip(model.posterior(&held)?) {
                posteriors[*i] = p;
            }
        }
    }
    Ok(OutOfFold {
        posteriors,
        folds: k,
        reduced: k < k_folds,
    })
}

/// Cross-validated tpr/fpr of the classifier `trainer` would produce.
pub fn crossval_rates(
    train: &LabeledSample,
    labels: LabelKind,
    trainer: &TrainerConfig,
    k_folds: usize,
    soft: bool,
    seed: u64,
) -> Result<RateEstimates> {
    let oof = crossval_posteriors(train, labels, trainer, k_folds, seed)?;
    Ok(oof.rates(train.require(labels)?, soft))
}
