//! Experimental protocols: three-way splits, controlled resampling, label
//! flipping, the repetition loop and error aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ErrorRecord, LabelKind, LabeledSample, Prevalence, ProtocolKind, POSITIVE,
};
use crate::error::{Error, Result};
use crate::fairness::{
    combine_branches, decoupling_metrics, disparity, estimate_with, fit_dual, fit_shared,
    split_by_prediction, BranchInput, BranchQuantifiers, DecouplingMetrics, DEFAULT_PSEUDOCOUNT,
};
use crate::linear::{ClassWeighting, LinearModel, TrainerConfig};
use crate::quantify::{Method, QuantifierConfig};
use crate::seeding::{self, Rng};

pub const PAPER_SPLITS: usize = 5;
pub const PAPER_REPEATS: usize = 10;
pub const DESK_SPLITS: usize = 2;
pub const DESK_REPEATS: usize = 3;
pub const DEFAULT_SAMPLE_SIZE: usize = 500;
pub const DEFAULT_MIN_D2_SIZE: usize = 1000;

/// The six orderings of the three split parts as `(D1, D2, D3)`.
pub const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// `floor(x + ½)` with a small guard against representation error.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// An estimator evaluated by a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    /// A quantification method, with dual branch quantifiers (`split`) or a
    /// single shared one.
    Quantifier { method: Method, split: bool },
    /// Uses the true branch prevalences of the test material.
    Oracle,
}

impl Estimator {
    pub fn dual(method: Method) -> Self {
        Estimator::Quantifier { method, split: true }
    }

    pub fn shared(method: Method) -> Self {
        Estimator::Quantifier { method, split: false }
    }

    pub fn label(&self) -> String {
        match self {
            Estimator::Quantifier { method, split: true } => method.name().to_string(),
            Estimator::Quantifier { method, split: false } => format!("{}-nosD2", method.name()),
            Estimator::Oracle => "Oracle".to_string(),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("oracle") {
            return Ok(Estimator::Oracle);
        }
        let lower = s.to_ascii_lowercase();
        match lower.strip_suffix("-nosd2") {
            Some(base) => Ok(Estimator::shared(base.parse()?)),
            None => Ok(Estimator::dual(s.parse()?)),
        }
    }
}

impl Serialize for Estimator {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Estimator {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything the estimation side of a run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub quantifier: QuantifierConfig,
    /// Trainer for the target classifier `h`.
    #[serde(default = "balanced_trainer")]
    pub classifier: TrainerConfig,
    #[serde(default = "default_pseudocount")]
    pub pseudocount: f64,
}

fn balanced_trainer() -> TrainerConfig {
    TrainerConfig {
        class_weighting: ClassWeighting::Balanced,
        ..TrainerConfig::default()
    }
}

fn default_pseudocount() -> f64 {
    DEFAULT_PSEUDOCOUNT
}

impl PipelineConfig {
    pub fn new(estimators: Vec<Estimator>) -> Self {
        PipelineConfig {
            estimators,
            quantifier: QuantifierConfig::default(),
            classifier: balanced_trainer(),
            pseudocount: DEFAULT_PSEUDOCOUNT,
        }
    }

    pub fn methods(methods: &[Method]) -> Self {
        Self::new(methods.iter().map(|&m| Estimator::dual(m)).collect())
    }
}

/// Grid of protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Grid {
    Values { values: Vec<f64> },
    /// `count` sizes in geometric progression from `min` to the auxiliary
    /// set size.
    Logspace { min: usize, count: usize },
}

impl Grid {
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Grid {
        let values = (0..count)
            .map(|i| {
                let v = lo + (hi - lo) * i as f64 / (count - 1) as f64;
                (v * 1e9).round() / 1e9
            })
            .collect();
        Grid::Values { values }
    }

    pub fn default_for(protocol: ProtocolKind) -> Grid {
        match protocol {
            ProtocolKind::SamplePrevD2Neg | ProtocolKind::SamplePrevD2Pos => {
                Grid::linspace(0.1, 0.9, 9)
            }
            ProtocolKind::SampleSizeD2 => Grid::Logspace {
                min: DEFAULT_MIN_D2_SIZE,
                count: 5,
            },
            _ => Grid::linspace(0.0, 1.0, 11),
        }
    }
}

/// Geometric progression of `count` integer sizes from `min` to `max`.
pub fn logspace_sizes(min: usize, max: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![max];
    }
    let ratio = (max as f64 / min as f64).ln();
    (0..count)
        .map(|i| {
            let v = (min as f64) * (ratio * i as f64 / (count - 1) as f64).exp();
            round_half_up(v).clamp(min, max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub protocol: ProtocolKind,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default = "desk_splits")]
    pub n_splits: usize,
    #[serde(default = "desk_repeats")]
    pub n_repeats: usize,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_dataset() -> String {
    "dataset".into()
}

fn desk_splits() -> usize {
    DESK_SPLITS
}

fn desk_repeats() -> usize {
    DESK_REPEATS
}

fn default_sample_size() -> usize {
    DEFAULT_SAMPLE_SIZE
}

impl ProtocolSpec {
    /// Desk scale: 2 splits × 6 permutations × 3 repeats.
    pub fn desk(dataset: &str, protocol: ProtocolKind, base_seed: u64) -> Self {
        ProtocolSpec {
            dataset: dataset.to_string(),
            protocol,
            grid: None,
            n_splits: DESK_SPLITS,
            n_repeats: DESK_REPEATS,
            sample_size: DEFAULT_SAMPLE_SIZE,
            base_seed,
        }
    }

    /// Paper scale: 5 splits × 6 permutations × 10 repeats.
    pub fn paper(dataset: &str, protocol: ProtocolKind, base_seed: u64) -> Self {
        ProtocolSpec {
            n_splits: PAPER_SPLITS,
            n_repeats: PAPER_REPEATS,
            ..Self::desk(dataset, protocol, base_seed)
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
            .clone()
            .unwrap_or_else(|| Grid::default_for(self.protocol))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProtocol(m));
        if self.n_splits == 0 || self.n_repeats == 0 {
            return bad("n_splits and n_repeats must be positive".into());
        }
        if self.sample_size < 2 {
            return bad(format!("sample_size {} < 2", self.sample_size));
        }
        match (self.protocol, self.grid()) {
            (ProtocolKind::SampleSizeD2, Grid::Logspace { min, count }) => {
                if min < 2 || count == 0 {
                    return bad("logspace grid needs min >= 2 and count >= 1".into());
                }
            }
            (ProtocolKind::SampleSizeD2, Grid::Values { values }) => {
                if values.is_empty() || values.iter().any(|v| *v < 2.0 || v.fract() != 0.0) {
                    return bad("sizes must be integers >= 2".into());
                }
            }
            (_, Grid::Logspace { .. }) => {
                return bad(format!("{} takes a prevalence grid", self.protocol));
            }
            (p, Grid::Values { values }) => {
                if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad("prevalence grid values must lie in [0, 1]".into());
                }
                let d2 = matches!(p, ProtocolKind::SamplePrevD2Neg | ProtocolKind::SamplePrevD2Pos);
                if d2 && values.iter().any(|&v| v <= 0.0 || v >= 1.0) {
                    return bad("auxiliary prevalence grid must exclude 0 and 1".into());
                }
            }
        }
        Ok(())
    }

    /// Parameter values after resolving size grids against the size of the
    /// smallest split part.
    pub fn resolve_grid(&self, min_part: usize) -> Result<Vec<f64>> {
        match self.grid() {
            Grid::Values { values } => Ok(values),
            Grid::Logspace { min, count } => {
                if min > min_part {
                    return Err(Error::InvalidProtocol(format!(
                        "minimum auxiliary size {min} exceeds split part size {min_part}"
                    )));
                }
                Ok(logspace_sizes(min, min_part, count)
                    .into_iter()
                    .map(|s| s as f64)
                    .collect())
            }
        }
    }
}

/// Deals each `(S, Y)` cell round-robin into three parts after shuffling it.
/// The starting part rotates with the running total so that part sizes
/// differ by at most one overall as well as per cell.
pub fn stratified_three_split(dataset: &LabeledSample, seed: u64) -> Result<[Vec<usize>; 3]> {
    let s = dataset.require(LabelKind::Sensitive)?;
    let y = dataset.require(LabelKind::Target)?;
    let mut cells: [Vec<usize>; 4] = Default::default();
    for i in 0..dataset.len() {
        cells[usize::from(s[i]) * 2 + usize::from(y[i])].push(i);
    }
    for (c, cell) in cells.iter().enumerate() {
        if cell.len() < 3 {
            return Err(Error::CellTooSmall {
                s: (c / 2) as u8,
                y: (c % 2) as u8,
                count: cell.len(),
                needed: 3,
            });
        }
    }
    let mut rng = seeding::rng(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut offset = 0;
    for mut cell in cells {
        cell.shuffle(&mut rng);
        for (j, i) in cell.iter().enumerate() {
            parts[(offset + j) % 3].push(*i);
        }
        offset = (offset + cell.len()) % 3;
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// `k` draws from `pool`: without replacement when possible, otherwise with
/// replacement (second value `true`).
pub fn draw(pool: &[usize], k: usize, rng: &mut Rng) -> Result<(Vec<usize>, bool)> {
    if k == 0 {
        return Ok((Vec::new(), false));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool { needed: k });
    }
    if pool.len() >= k {
        Ok((pool.choose_multiple(rng, k).copied().collect(), false))
    } else {
        Ok(((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect(), true))
    }
}

/// Indices with `round(size·p)` members of class 1 and the rest of class 0
/// drawn from the two pools.
pub fn draw_at_prevalence(
    pools: [&[usize]; 2],
    p: f64,
    size: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, bool)> {
    let n1 = round_half_up(size as f64 * p).min(size);
    let (mut ones, f1) = draw(pools[1], n1, rng)?;
    let (zeros, f0) = draw(pools[0], size - n1, rng)?;
    ones.extend(zeros);
    Ok((ones, f1 || f0))
}

fn class_pools(labels: &[u8], within: &[usize]) -> [Vec<usize>; 2] {
    let mut pools: [Vec<usize>; 2] = Default::default();
    for &i in within {
        pools[usize::from(labels[i] == POSITIVE)].push(i);
    }
    pools
}

/// A sample of `size` instances whose selected label has prevalence exactly
/// `round(size·target_prev)/size`. The flag reports a with-replacement
/// fallback.
pub fn sample_at_prevalence(
    source: &LabeledSample,
    kind: LabelKind,
    target_prev: f64,
    size: usize,
    seed: u64,
) -> Result<(LabeledSample, bool)> {
    let labels = source.require(kind)?;
    let all: Vec<usize> = (0..source.len()).collect();
    let pools = class_pools(labels, &all);
    let mut rng = seeding::rng(seed);
    let (idx, flag) = draw_at_prevalence([&pools[0], &pools[1]], target_prev, size, &mut rng)?;
    Ok((source.subset(&idx).ok_or(Error::EmptySample)?, flag))
}

/// A sample in which a share `p_equal` of the instances has `y = s`.
pub fn sample_joint_ys(
    source: &LabeledSample,
    p_equal: f64,
    size: usize,
    seed: u64,
) -> Result<(LabeledSample, bool)> {
    let s = source.require(LabelKind::Sensitive)?;
    let y = source.require(LabelKind::Target)?;
    let eq: Vec<u8> = s.iter().zip(y).map(|(a, b)| u8::from(a == b)).collect();
    let all: Vec<usize> = (0..source.len()).collect();
    let pools = class_pools(&eq, &all);
    let mut rng = seeding::rng(seed);
    let (idx, flag) = draw_at_prevalence([&pools[0], &pools[1]], p_equal, size, &mut rng)?;
    Ok((source.subset(&idx).ok_or(Error::EmptySample)?, flag))
}

/// Flips target labels so that `#(Y=⊕|S=1) = round(p·|S=1|)` and
/// `#(Y=⊖|S=0) = round(p·|S=0|)`, changing only labels that must change.
/// Returns the flip counts for groups `S=0` and `S=1`.
pub fn flip_labels(sample: &LabeledSample, p: f64, rng: &mut Rng) -> Result<(LabeledSample, [usize; 2])> {
    let s = sample.require(LabelKind::Sensitive)?.to_vec();
    let mut y = sample.require(LabelKind::Target)?.to_vec();
    let mut flips = [0usize; 2];
    for group in [0u8, 1] {
        let members: Vec<usize> = (0..s.len()).filter(|&i| s[i] == group).collect();
        if members.is_empty() {
            return Err(Error::EmptyGroup(group));
        }
        // the label that should reach share p in this group
        let wanted = group;
        let target = round_half_up(p * members.len() as f64).min(members.len());
        let have: Vec<usize> = members.iter().copied().filter(|&i| y[i] == wanted).collect();
        let lack: Vec<usize> = members.iter().copied().filter(|&i| y[i] != wanted).collect();
        let (pool, new_label, count) = if have.len() < target {
            (lack, wanted, target - have.len())
        } else {
            (have.clone(), 1 - wanted, have.len() - target)
        };
        for &i in pool.choose_multiple(rng, count) {
            y[i] = new_label;
        }
        flips[usize::from(group)] = count;
    }
    let mut out = sample.clone();
    out.target = Some(y);
    Ok((out, flips))
}

/// Uniform subsample of `size` instances followed by [`flip_labels`].
pub fn flip_to_target(
    source: &LabeledSample,
    p: f64,
    size: usize,
    seed: u64,
) -> Result<(LabeledSample, [usize; 2], bool)> {
    let mut rng = seeding::rng(seed);
    let all: Vec<usize> = (0..source.len()).collect();
    let (idx, flag) = draw(&all, size, &mut rng)?;
    let sub = source.subset(&idx).ok_or(Error::EmptySample)?;
    let (out, flips) = flip_labels(&sub, p, &mut rng)?;
    Ok((out, flips, flag))
}

/// A protocol work item that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub dataset: String,
    pub protocol: ProtocolKind,
    pub parameter: Option<f64>,
    pub split_id: usize,
    pub permutation_id: usize,
    pub repeat_id: Option<usize>,
    pub methods: Vec<String>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub records: Vec<ErrorRecord>,
    pub failures: Vec<Failure>,
}

impl ProtocolOutcome {
    /// Records that would be produced without failures.
    pub fn expected_records(spec: &ProtocolSpec, grid_len: usize, n_estimators: usize) -> usize {
        grid_len * spec.n_splits * PERMUTATIONS.len() * spec.n_repeats * n_estimators
    }

    /// Number of records lost to failures.
    pub fn failed_records(&self, spec: &ProtocolSpec, grid_len: usize) -> usize {
        self.failures
            .iter()
            .map(|f| {
                let grid = if f.parameter.is_some() { 1 } else { grid_len };
                let repeats = if f.repeat_id.is_some() { 1 } else { spec.n_repeats };
                grid * repeats * f.methods.len()
            })
            .sum()
    }
}

/// One fitted estimator ready to be evaluated on test branches.
#[derive(Debug, Clone)]
enum Fitted {
    Quantifier { label: String, bq: BranchQuantifiers },
    Oracle { control: [f64; 2] },
}

impl Fitted {
    fn label(&self) -> String {
        match self {
            Fitted::Quantifier { label, .. } => label.clone(),
            Fitted::Oracle { .. } => "Oracle".into(),
        }
    }
}

/// Test material for one evaluation: the two branches (with sensitive
/// labels, used only for the reference value and the oracle) and the true
/// disparity on them.
struct Evaluation {
    pos: Option<LabeledSample>,
    neg: Option<LabeledSample>,
    true_dd: f64,
    flags: Vec<String>,
}

struct Context<'a> {
    spec: &'a ProtocolSpec,
    config: &'a PipelineConfig,
    grid: Vec<f64>,
}

fn item_seed(spec: &ProtocolSpec, split: usize, perm: usize, repeat: usize, point: usize) -> u64 {
    seeding::derive_seed(
        spec.base_seed,
        &[
            seeding::tag(spec.protocol.name()),
            split as u64,
            perm as u64,
            repeat as u64,
            point as u64,
        ],
    )
}

fn unit_seed(spec: &ProtocolSpec, split: usize, perm: usize) -> u64 {
    seeding::derive_seed(
        spec.base_seed,
        &[seeding::tag(spec.protocol.name()), seeding::tag("unit"), split as u64, perm as u64],
    )
}

fn split_seed(base: u64, split: usize) -> u64 {
    seeding::derive_seed(base, &[seeding::tag("split"), split as u64])
}

/// Fits branch quantifiers for every configured estimator. Methods sharing
/// a classifier are fitted together; when a joint fit fails, each method is
/// retried alone so one degenerate method does not take the others down.
fn fit_estimators(
    config: &PipelineConfig,
    d2_pos: &LabeledSample,
    d2_neg: &LabeledSample,
    d2_all: &LabeledSample,
    seed: u64,
) -> (Vec<Fitted>, Vec<(String, Error)>) {
    let mut fitted = Vec::new();
    let mut errors = Vec::new();
    let control = [
        d2_pos.prevalence(LabelKind::Sensitive).map(|p| p.value).unwrap_or(0.0),
        d2_neg.prevalence(LabelKind::Sensitive).map(|p| p.value).unwrap_or(0.0),
    ];
    for split in [true, false] {
        let methods: Vec<Method> = config
            .estimators
            .iter()
            .filter_map(|e| match e {
                Estimator::Quantifier { method, split: s } if *s == split => Some(*method),
                _ => None,
            })
            .collect();
        if methods.is_empty() {
            continue;
        }
        let fit_group = |ms: &[Method]| -> Result<Vec<BranchQuantifiers>> {
            if split {
                fit_dual(ms, d2_pos, d2_neg, &config.quantifier, seed)
            } else {
                fit_shared(ms, d2_all, &config.quantifier, seed)
            }
        };
        let results: Vec<(Method, Result<BranchQuantifiers>)> = match fit_group(&methods) {
            Ok(bqs) => methods.iter().copied().zip(bqs.into_iter().map(Ok)).collect(),
            Err(_) => methods
                .iter()
                .map(|&m| (m, fit_group(&[m]).map(|mut v| v.remove(0))))
                .collect(),
        };
        for (method, r) in results {
            let label = Estimator::Quantifier { method, split }.label();
            match r {
                Ok(bq) => fitted.push(Fitted::Quantifier { label, bq }),
                Err(e) => errors.push((label, e)),
            }
        }
    }
    if config.estimators.contains(&Estimator::Oracle) {
        fitted.push(Fitted::Oracle { control });
    }
    (fitted, errors)
}

fn prevalence_of(part: Option<&LabeledSample>) -> Option<f64> {
    part.and_then(|p| p.prevalence(LabelKind::Sensitive).ok())
        .map(|p: Prevalence| p.value)
}

fn evaluate(fitted: &Fitted, ev: &Evaluation, pseudocount: f64) -> Result<(f64, Vec<String>)> {
    match fitted {
        Fitted::Quantifier { bq, .. } => {
            let est = estimate_with(
                bq,
                ev.pos.as_ref().map(|s| &s.features),
                ev.neg.as_ref().map(|s| &s.features),
                pseudocount,
            )?;
            Ok((est.delta, est.flags))
        }
        Fitted::Oracle { control } => {
            let size = |s: Option<&LabeledSample>| s.map_or(0, LabeledSample::len);
            let pos = BranchInput {
                raw: prevalence_of(ev.pos.as_ref()),
                size: size(ev.pos.as_ref()),
                control: control[0],
            };
            let neg = BranchInput {
                raw: prevalence_of(ev.neg.as_ref()),
                size: size(ev.neg.as_ref()),
                control: control[1],
            };
            let est = combine_branches(pos, neg, pseudocount);
            Ok((est.delta, est.flags))
        }
    }
}

/// Splits a labeled test set by `h` and computes the disparity on it.
fn natural_evaluation(h: &LinearModel, d3: &LabeledSample) -> Result<Evaluation> {
    let preds = h.predict(&d3.features, 0.5)?;
    let true_dd = disparity(&preds, d3.require(LabelKind::Sensitive)?)?;
    let (pos, neg) = split_by_prediction(&preds);
    Ok(Evaluation {
        pos: d3.subset(&pos),
        neg: d3.subset(&neg),
        true_dd,
        flags: Vec::new(),
    })
}

fn auxiliary_branches(h: &LinearModel, d2: &LabeledSample) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(split_by_prediction(&h.predict(&d2.features, 0.5)?))
}

fn subset_or_empty(d: &LabeledSample, idx: &[usize], which: &'static str) -> Result<LabeledSample> {
    d.subset(idx).ok_or(Error::BranchDegeneracy(which))
}

/// What one (repeat, grid point) item produced.
struct ItemResult {
    parameter: f64,
    repeat: usize,
    seed: u64,
    evaluation: Result<(Arc<Vec<Fitted>>, Vec<(String, Error)>, Evaluation)>,
}

/// Whether the protocol varies the test branch predicted `⊕` (otherwise
/// `⊖`).
fn varies_positive(protocol: ProtocolKind) -> bool {
    matches!(protocol, ProtocolKind::SamplePrevD3Pos | ProtocolKind::SamplePrevD2Pos)
}

fn run_unit(ctx: &Context<'_>, parts: &[LabeledSample; 3], split: usize, perm: usize) -> Vec<ItemResult> {
    let order = PERMUTATIONS[perm];
    let (d1, d2, d3) = (&parts[order[0]], &parts[order[1]], &parts[order[2]]);
    let spec = ctx.spec;
    let config = ctx.config;
    let useed = unit_seed(spec, split, perm);
    let items: Vec<(usize, usize)> = (0..spec.n_repeats)
        .flat_map(|r| (0..ctx.grid.len()).map(move |g| (r, g)))
        .collect();
    let fail_all = |e: Error| -> Vec<ItemResult> {
        items
            .iter()
            .map(|&(r, g)| ItemResult {
                parameter: ctx.grid[g],
                repeat: r,
                seed: item_seed(spec, split, perm, r, g),
                evaluation: Err(e.clone()),
            })
            .collect()
    };

    let train_h = |sample: &LabeledSample, seed: u64| -> Result<LinearModel> {
        Ok(config
            .classifier
            .train(sample, LabelKind::Target, seeding::derive_seed(seed, &[seeding::tag("h")]))?
            .model)
    };

    // Per-unit state for protocols that train h once.
    let shared_h = match spec.protocol {
        ProtocolKind::SamplePrevD1 | ProtocolKind::FlipPrevD1 => None,
        _ => match train_h(d1, useed) {
            Ok(h) => Some(h),
            Err(e) => return fail_all(e),
        },
    };

    // Quantifiers fitted once per unit for the test-shift protocols.
    let unit_fit = match spec.protocol {
        ProtocolKind::SamplePrevD3Neg | ProtocolKind::SamplePrevD3Pos => {
            let h = shared_h.as_ref().expect("h trained");
            let prepared = (|| -> Result<_> {
                let (p, n) = auxiliary_branches(h, d2)?;
                let d2p = subset_or_empty(d2, &p, "positive")?;
                let d2n = subset_or_empty(d2, &n, "negative")?;
                let (fitted, errors) = fit_estimators(config, &d2p, &d2n, d2, useed);
                let preds = h.predict(&d3.features, 0.5)?;
                let (tp, tn) = split_by_prediction(&preds);
                Ok((Arc::new(fitted), errors, tp, tn))
            })();
            match prepared {
                Ok(v) => Some(v),
                Err(e) => return fail_all(e),
            }
        }
        _ => None,
    };
    let natural = match (spec.protocol, &shared_h) {
        (
            ProtocolKind::SamplePrevD2Neg | ProtocolKind::SamplePrevD2Pos | ProtocolKind::SampleSizeD2,
            Some(h),
        ) => match natural_evaluation(h, d3).and_then(|ev| Ok((ev, auxiliary_branches(h, d2)?))) {
            Ok(v) => Some(v),
            Err(e) => return fail_all(e),
        },
        _ => None,
    };

    let d3_s = d3.sensitive.as_deref().unwrap_or(&[]);
    let d2_s = d2.sensitive.as_deref().unwrap_or(&[]);
    let size = spec.sample_size;

    items
        .par_iter()
        .map(|&(r, g)| {
            let p = ctx.grid[g];
            let seed = item_seed(spec, split, perm, r, g);
            let mut rng = seeding::rng(seed);
            let evaluation = (|| -> Result<_> {
                match spec.protocol {
                    ProtocolKind::SamplePrevD3Neg | ProtocolKind::SamplePrevD3Pos => {
                        let (fitted, errors, tp, tn) = unit_fit.as_ref().expect("unit fitted");
                        let vary_pos = varies_positive(spec.protocol);
                        let (varied, other) = if vary_pos { (tp, tn) } else { (tn, tp) };
                        let pools = class_pools(d3_s, varied);
                        let (vi, f1) = draw_at_prevalence([&pools[0], &pools[1]], p, size, &mut rng)?;
                        let (oi, f2) = draw(other, size, &mut rng)?;
                        let (pi, ni) = if vary_pos { (vi, oi) } else { (oi, vi) };
                        let mut preds = vec![1u8; pi.len()];
                        preds.extend(std::iter::repeat(0u8).take(ni.len()));
                        let s: Vec<u8> = pi.iter().chain(&ni).map(|&i| d3_s[i]).collect();
                        let true_dd = disparity(&preds, &s)?;
                        let mut flags = Vec::new();
                        if f1 || f2 {
                            flags.push("with-replacement".to_string());
                        }
                        let ev = Evaluation { pos: d3.subset(&pi), neg: d3.subset(&ni), true_dd, flags };
                        Ok((fitted.clone(), errors.clone(), ev))
                    }
                    ProtocolKind::SamplePrevD2Neg | ProtocolKind::SamplePrevD2Pos => {
                        let (ev, (bp, bn)) = natural.as_ref().expect("natural split");
                        let vary_pos = varies_positive(spec.protocol);
                        let (varied, other) = if vary_pos { (bp, bn) } else { (bn, bp) };
                        let pools = class_pools(d2_s, varied);
                        let (vi, f1) = draw_at_prevalence([&pools[0], &pools[1]], p, size, &mut rng)?;
                        let (oi, f2) = draw(other, size, &mut rng)?;
                        let (pi, ni) = if vary_pos { (vi, oi) } else { (oi, vi) };
                        let d2p = subset_or_empty(d2, &pi, "positive")?;
                        let d2n = subset_or_empty(d2, &ni, "negative")?;
                        let mut all = pi.clone();
                        all.extend(&ni);
                        let d2all = subset_or_empty(d2, &all, "positive")?;
                        let (fitted, errors) = fit_estimators(config, &d2p, &d2n, &d2all, seed);
                        let mut flags = Vec::new();
                        if f1 || f2 {
                            flags.push("with-replacement".to_string());
                        }
                        let ev = Evaluation { pos: ev.pos.clone(), neg: ev.neg.clone(), true_dd: ev.true_dd, flags };
                        Ok((Arc::new(fitted), errors, ev))
                    }
                    ProtocolKind::SampleSizeD2 => {
                        let (ev, _) = natural.as_ref().expect("natural split");
                        let h = shared_h.as_ref().expect("h trained");
                        let all: Vec<usize> = (0..d2.len()).collect();
                        let (idx, flag) = draw(&all, p as usize, &mut rng)?;
                        let sub = d2.subset(&idx).ok_or(Error::EmptySample)?;
                        let (bp, bn) = auxiliary_branches(h, &sub)?;
                        let d2p = subset_or_empty(&sub, &bp, "positive")?;
                        let d2n = subset_or_empty(&sub, &bn, "negative")?;
                        let (fitted, errors) = fit_estimators(config, &d2p, &d2n, &sub, seed);
                        let flags = if flag { vec!["with-replacement".to_string()] } else { vec![] };
                        let ev = Evaluation { pos: ev.pos.clone(), neg: ev.neg.clone(), true_dd: ev.true_dd, flags };
                        Ok((Arc::new(fitted), errors, ev))
                    }
                    ProtocolKind::SamplePrevD1 | ProtocolKind::FlipPrevD1 => {
                        let sample_seed = seeding::derive_seed(seed, &[seeding::tag("d1")]);
                        let (d1s, flag) = if spec.protocol == ProtocolKind::SamplePrevD1 {
                            sample_joint_ys(d1, p, size, sample_seed)?
                        } else {
                            let (s, _, f) = flip_to_target(d1, p, size, sample_seed)?;
                            (s, f)
                        };
                        let h = train_h(&d1s, seed)?;
                        let (bp, bn) = auxiliary_branches(&h, d2)?;
                        let d2p = subset_or_empty(d2, &bp, "positive")?;
                        let d2n = subset_or_empty(d2, &bn, "negative")?;
                        let (fitted, errors) = fit_estimators(config, &d2p, &d2n, d2, seed);
                        let mut ev = natural_evaluation(&h, d3)?;
                        if flag {
                            ev.flags.push("with-replacement".to_string());
                        }
                        Ok((Arc::new(fitted), errors, ev))
                    }
                }
            })();
            ItemResult { parameter: p, repeat: r, seed, evaluation }
        })
        .collect()
}

/// Materializes the three parts of every split.
fn make_splits(data: &LabeledSample, spec: &ProtocolSpec) -> Result<Vec<([LabeledSample; 3], u64)>> {
    (0..spec.n_splits)
        .map(|k| {
            let parts = stratified_three_split(data, split_seed(spec.base_seed, k))?;
            let hash = seeding::hash_indices(parts.iter().map(Vec::as_slice));
            let take = |i: usize| data.subset(&parts[i]).ok_or(Error::EmptySample);
            Ok(([take(0)?, take(1)?, take(2)?], hash))
        })
        .collect()
}

fn sort_records(records: &mut [ErrorRecord]) {
    records.sort_by(|a, b| {
        (a.protocol, &a.method, a.split_id, a.permutation_id, a.repeat_id)
            .cmp(&(b.protocol, &b.method, b.split_id, b.permutation_id, b.repeat_id))
            .then(a.parameter.total_cmp(&b.parameter))
    });
}

fn prepare(data: &LabeledSample, spec: &ProtocolSpec, config: &PipelineConfig) -> Result<(Vec<f64>, Vec<([LabeledSample; 3], u64)>)> {
    spec.validate()?;
    if config.estimators.is_empty() {
        return Err(Error::InvalidProtocol("no estimators configured".into()));
    }
    if config.pseudocount < 0.0 {
        return Err(Error::InvalidProtocol("negative pseudocount".into()));
    }
    let splits = make_splits(data, spec)?;
    let min_part = splits
        .iter()
        .flat_map(|(p, _)| p.iter().map(LabeledSample::len))
        .min()
        .unwrap_or(0);
    let grid = spec.resolve_grid(min_part)?;
    Ok((grid, splits))
}

/// Runs the protocol's full loop nest: splits × permutations × repeats ×
/// grid points × estimators. Per-item failures are collected rather than
/// aborting the run; the output is sorted and independent of the number of
/// worker threads.
pub fn run_protocol(data: &LabeledSample, spec: &ProtocolSpec, config: &PipelineConfig) -> Result<ProtocolOutcome> {
    let (grid, splits) = prepare(data, spec, config)?;
    let ctx = Context { spec, config, grid };
    let labels: Vec<String> = config.estimators.iter().map(Estimator::label).collect();
    let units: Vec<(usize, usize)> = (0..spec.n_splits)
        .flat_map(|s| (0..PERMUTATIONS.len()).map(move |p| (s, p)))
        .collect();
    let per_unit: Vec<(usize, usize, Vec<ItemResult>)> = units
        .par_iter()
        .map(|&(s, p)| (s, p, run_unit(&ctx, &splits[s].0, s, p)))
        .collect();

    let mut outcome = ProtocolOutcome::default();
    for (split, perm, items) in per_unit {
        let split_hash = splits[split].1;
        for item in items {
            let base_failure = |methods: Vec<String>, e: &Error| Failure {
                dataset: spec.dataset.clone(),
                protocol: spec.protocol,
                parameter: Some(item.parameter),
                split_id: split,
                permutation_id: perm,
                repeat_id: Some(item.repeat),
                methods,
                error: e.to_string(),
            };
            match &item.evaluation {
                Err(e) => outcome.failures.push(base_failure(labels.clone(), e)),
                Ok((fitted, errors, ev)) => {
                    for (label, e) in errors {
                        outcome.failures.push(base_failure(vec![label.clone()], e));
                    }
                    for f in fitted.iter() {
                        match evaluate(f, ev, config.pseudocount) {
                            Ok((estimated, mut flags)) => {
                                flags.extend(ev.flags.iter().cloned());
                                flags.sort();
                                flags.dedup();
                                outcome.records.push(ErrorRecord {
                                    dataset: spec.dataset.clone(),
                                    protocol: spec.protocol,
                                    parameter: item.parameter,
                                    split_id: split,
                                    permutation_id: perm,
                                    repeat_id: item.repeat,
                                    method: f.label(),
                                    signed_error: estimated - ev.true_dd,
                                    true_dd: ev.true_dd,
                                    estimated_dd: estimated,
                                    seed: item.seed,
                                    split_hash,
                                    flags,
                                });
                            }
                            Err(e) => outcome.failures.push(base_failure(vec![f.label()], &e)),
                        }
                    }
                }
            }
        }
    }
    if !outcome.failures.is_empty() {
        warn!("{} protocol items failed", outcome.failures.len());
    }
    debug!("{} records", outcome.records.len());
    sort_records(&mut outcome.records);
    Ok(outcome)
}

/// Classification and quantification quality of one branch quantifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingRecord {
    pub protocol: ProtocolKind,
    pub parameter: f64,
    pub split_id: usize,
    pub permutation_id: usize,
    pub repeat_id: usize,
    pub method: String,
    /// `pos` or `neg`: the test branch that was evaluated.
    pub branch: String,
    pub abs_error: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecouplingOutcome {
    pub records: Vec<DecouplingRecord>,
    pub failures: Vec<Failure>,
}

/// Methods whose individual-level labels are defined.
pub const DECOUPLING_METHODS: [Method; 3] = [Method::Cc, Method::Pacc, Method::Sld];

/// Evaluates quantification error, accuracy and F1 of the branch
/// quantifier on the test branch that the protocol targets.
pub fn run_decoupling(data: &LabeledSample, spec: &ProtocolSpec, methods: &[Method], base: &PipelineConfig) -> Result<DecouplingOutcome> {
    if !matches!(
        spec.protocol,
        ProtocolKind::SamplePrevD2Neg
            | ProtocolKind::SamplePrevD2Pos
            | ProtocolKind::SamplePrevD3Neg
            | ProtocolKind::SamplePrevD3Pos
    ) {
        return Err(Error::InvalidProtocol(format!(
            "decoupling is defined for the prevalence-shift protocols, not {}",
            spec.protocol
        )));
    }
    if let Some(m) = methods.iter().find(|m| !DECOUPLING_METHODS.contains(m)) {
        return Err(Error::NotApplicable(m.name().into()));
    }
    let config = PipelineConfig {
        estimators: methods.iter().map(|&m| Estimator::dual(m)).collect(),
        ..base.clone()
    };
    let (grid, splits) = prepare(data, spec, &config)?;
    let ctx = Context { spec, config: &config, grid };
    let vary_pos = varies_positive(spec.protocol);
    let branch = if vary_pos { "pos" } else { "neg" };
    let units: Vec<(usize, usize)> = (0..spec.n_splits)
        .flat_map(|s| (0..PERMUTATIONS.len()).map(move |p| (s, p)))
        .collect();
    let per_unit: Vec<(usize, usize, Vec<ItemResult>)> = units
        .par_iter()
        .map(|&(s, p)| (s, p, run_unit(&ctx, &splits[s].0, s, p)))
        .collect();
    let mut out = DecouplingOutcome::default();
    for (split, perm, items) in per_unit {
        for item in items {
            let failure = |methods: Vec<String>, e: &Error| Failure {
                dataset: spec.dataset.clone(),
                protocol: spec.protocol,
                parameter: Some(item.parameter),
                split_id: split,
                permutation_id: perm,
                repeat_id: Some(item.repeat),
                methods,
                error: e.to_string(),
            };
            let (fitted, errors, ev) = match &item.evaluation {
                Ok(v) => v,
                Err(e) => {
                    out.failures.push(failure(methods.iter().map(|m| m.name().to_string()).collect(), e));
                    continue;
                }
            };
            for (label, e) in errors {
                out.failures.push(failure(vec![label.clone()], e));
            }
            let test = if vary_pos { ev.pos.as_ref() } else { ev.neg.as_ref() };
            for f in fitted.iter() {
                let Fitted::Quantifier { label, bq, .. } = f else { continue };
                let q = if vary_pos { &bq.positive } else { &bq.negative };
                let result = test
                    .ok_or(Error::EmptySample)
                    .and_then(|t| decoupling_metrics(q, t));
                match result {
                    Ok(DecouplingMetrics { abs_error, accuracy, f1 }) => out.records.push(DecouplingRecord {
                        protocol: spec.protocol,
                        parameter: item.parameter,
                        split_id: split,
                        permutation_id: perm,
                        repeat_id: item.repeat,
                        method: label.clone(),
                        branch: branch.to_string(),
                        abs_error,
                        accuracy,
                        f1,
                    }),
                    Err(e) => out.failures.push(failure(vec![label.clone()], &e)),
                }
            }
        }
    }
    out.records.sort_by(|a, b| {
        (&a.method, a.split_id, a.permutation_id, a.repeat_id)
            .cmp(&(&b.method, b.split_id, b.permutation_id, b.repeat_id))
            .then(a.parameter.total_cmp(&b.parameter))
    });
    Ok(out)
}

/// Mean decoupling metrics per method and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingRow {
    pub protocol: ProtocolKind,
    pub method: String,
    pub parameter: f64,
    pub n: usize,
    pub mae: f64,
    pub accuracy: f64,
    pub f1: f64,
}

pub fn summarize_decoupling(records: &[DecouplingRecord]) -> Vec<DecouplingRow> {
    let mut groups: BTreeMap<(ProtocolKind, String, u64), Vec<&DecouplingRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.protocol, r.method.clone(), ordered_bits(r.parameter)))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((protocol, method, _), rs)| {
            let n = rs.len() as f64;
            DecouplingRow {
                protocol,
                method,
                parameter: rs[0].parameter,
                n: rs.len(),
                mae: rs.iter().map(|r| r.abs_error).sum::<f64>() / n,
                accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / n,
                f1: rs.iter().map(|r| r.f1).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Bit pattern of a float that sorts like the float for non-negative values.
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if x.is_sign_negative() {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Significance of a method's difference from the best method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Significance {
    Best,
    /// `p ≤ 0.001`: clearly worse than the best.
    Plain,
    /// `0.001 < p < 0.05`.
    Dagger,
    /// `p ≥ 0.05`: not distinguishable from the best.
    DoubleDagger,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p >= 0.05 {
            Significance::DoubleDagger
        } else if p > 0.001 {
            Significance::Dagger
        } else {
            Significance::Plain
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Significance::Best => "*",
            Significance::Plain => "",
            Significance::Dagger => "\u{2020}",
            Significance::DoubleDagger => "\u{2021}",
        }
    }
}

/// Two-tailed p-value of the paired t-test on `a - b`. Zero-variance
/// differences give `1` when their mean is zero and `0` otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "paired errors",
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidProtocol("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 || !var.is_finite() {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let nu = (n - 1) as f64;
    let x = nu / (nu + t * t);
    Ok(statrs::function::beta::beta_reg(nu / 2.0, 0.5, x).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: String,
    pub n: usize,
    pub mae: f64,
    pub mae_std: f64,
    pub mse: f64,
    pub mse_std: f64,
    pub p_ae_lt_01: f64,
    pub p_ae_lt_02: f64,
    pub mae_significance: Significance,
    pub mse_significance: Significance,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

type PairKey = (ProtocolKind, usize, usize, usize, u64);

fn pair_key(r: &ErrorRecord) -> PairKey {
    let (s, p, rep, param) = r.pairing_key();
    (r.protocol, s, p, rep, param)
}

fn tier(
    best: &BTreeMap<PairKey, f64>,
    mine: &BTreeMap<PairKey, f64>,
) -> Significance {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (k, v) in mine {
        if let Some(w) = best.get(k) {
            a.push(*v);
            b.push(*w);
        }
    }
    match paired_ttest(&a, &b) {
        Ok(p) => Significance::from_p(p),
        Err(_) => Significance::DoubleDagger,
    }
}

/// MAE/MSE with standard deviations (population) and the shares of
/// absolute errors below 0.1 and 0.2, per dataset and method. Each method
/// is compared with the dataset's best by paired t-tests on `|e|` (MAE) and
/// `e²` (MSE).
pub fn aggregate(records: &[ErrorRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut groups: BTreeMap<(String, String), Vec<&ErrorRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.method.clone()))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut abs_maps = Vec::new();
    let mut sq_maps = Vec::new();
    for ((dataset, method), rs) in &groups {
        let abs: Vec<f64> = rs.iter().map(|r| r.signed_error.abs()).collect();
        let sq: Vec<f64> = rs.iter().map(|r| r.signed_error.powi(2)).collect();
        let (mae, mae_std) = mean_std(&abs);
        let (mse, mse_std) = mean_std(&sq);
        let n = abs.len() as f64;
        rows.push(AggregateRow {
            dataset: dataset.clone(),
            method: method.clone(),
            n: abs.len(),
            mae,
            mae_std,
            mse,
            mse_std,
            p_ae_lt_01: abs.iter().filter(|&&e| e < 0.1).count() as f64 / n,
            p_ae_lt_02: abs.iter().filter(|&&e| e < 0.2).count() as f64 / n,
            mae_significance: Significance::Plain,
            mse_significance: Significance::Plain,
        });
        abs_maps.push(rs.iter().map(|r| (pair_key(r), r.signed_error.abs())).collect::<BTreeMap<_, _>>());
        sq_maps.push(rs.iter().map(|r| (pair_key(r), r.signed_error.powi(2))).collect::<BTreeMap<_, _>>());
    }
    let datasets: Vec<String> = {
        let mut d: Vec<String> = rows.iter().map(|r| r.dataset.clone()).collect();
        d.dedup();
        d
    };
    for ds in datasets {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].dataset == ds).collect();
        let best_mae = *idx
            .iter()
            .min_by(|&&a, &&b| rows[a].mae.total_cmp(&rows[b].mae))
            .expect("non-empty group");
        let best_mse = *idx
            .iter()
            .min_by(|&&a, &&b| rows[a].mse.total_cmp(&rows[b].mse))
            .expect("non-empty group");
        for &i in &idx {
            rows[i].mae_significance = if i == best_mae {
                Significance::Best
            } else {
                tier(&abs_maps[best_mae], &abs_maps[i])
            };
            rows[i].mse_significance = if i == best_mse {
                Significance::Best
            } else {
                tier(&sq_maps[best_mse], &sq_maps[i])
            };
        }
    }
    Ok(rows)
}

/// Quartiles (linear interpolation), whiskers at the most extreme points
/// within 1.5·IQR of the box, and the outliers beyond them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn boxplot(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let median = quantile_sorted(&v, 0.5);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo && *x <= hi).collect();
    Ok(BoxplotStats {
        n: v.len(),
        q1,
        median,
        q3,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v.iter().copied().filter(|x| *x < lo || *x > hi).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub dataset: String,
    pub protocol: ProtocolKind,
    pub method: String,
    pub parameter: f64,
    pub stats: BoxplotStats,
}

/// Boxplot statistics of the signed error per protocol, method and grid
/// point.
pub fn boxplot_series(records: &[ErrorRecord]) -> Result<Vec<BoxplotRow>> {
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut groups: BTreeMap<(String, ProtocolKind, String, u64), Vec<&ErrorRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.protocol, r.method.clone(), ordered_bits(r.parameter)))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, protocol, method, _), rs)| {
            let errors: Vec<f64> = rs.iter().map(|r| r.signed_error).collect();
            Ok(BoxplotRow {
                dataset,
                protocol,
                method,
                parameter: rs[0].parameter,
                stats: boxplot(&errors)?,
            })
        })
        .collect()
}
