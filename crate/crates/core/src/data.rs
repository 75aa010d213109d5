//! Domain types shared by every stage of the pipeline.
//!
//! Labels are stored as `u8` with `1` meaning the positive class (`⊕` for
//! targets and predictions, group `S=1` for the sensitive attribute) and `0`
//! the negative one. Absent label vectors are `None`, never sentinel values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSITIVE: u8 = 1;
pub const NEGATIVE: u8 = 0;

/// Which label vector of a [`LabeledSample`] an operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Sensitive,
    Target,
    Predicted,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Sensitive => "sensitive",
            LabelKind::Target => "target",
            LabelKind::Predicted => "predicted",
        }
    }
}

/// Dense row-major instance-by-feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix);
        }
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "feature values",
                expected: rows * cols,
                got: values.len(),
            });
        }
        let m = FeatureMatrix { rows, cols, values };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    what: "feature row",
                    expected: cols,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, values)
    }

    /// Constructs without validation; callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        FeatureMatrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.cols)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::NonFiniteValue {
                row: pos / self.cols,
                col: pos % self.cols,
            }),
            None => Ok(()),
        }
    }

    /// Copies the selected rows (repeats allowed). An empty selection yields
    /// `None` since a matrix needs at least one row.
    pub fn select(&self, indices: &[usize]) -> Option<FeatureMatrix> {
        if indices.is_empty() {
            return None;
        }
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Some(FeatureMatrix::from_parts_unchecked(
            indices.len(),
            self.cols,
            values,
        ))
    }
}

/// Features plus whichever label vectors are known for them.
///
/// Houses the training set (features + target), the auxiliary set
/// (features + sensitive) and the test set (features, with target and
/// sensitive retained only for evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: FeatureMatrix,
    pub sensitive: Option<Vec<u8>>,
    pub target: Option<Vec<u8>>,
    pub predicted: Option<Vec<u8>>,
}

impl LabeledSample {
    /// Builds a sample and validates it.
    pub fn new(
        features: FeatureMatrix,
        sensitive: Option<Vec<u8>>,
        target: Option<Vec<u8>>,
    ) -> Result<Self> {
        let sample = LabeledSample {
            features,
            sensitive,
            target,
            predicted: None,
        };
        validate_sample(&sample)?;
        Ok(sample)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn labels(&self, kind: LabelKind) -> Option<&[u8]> {
        match kind {
            LabelKind::Sensitive => self.sensitive.as_deref(),
            LabelKind::Target => self.target.as_deref(),
            LabelKind::Predicted => self.predicted.as_deref(),
        }
    }

    pub fn require(&self, kind: LabelKind) -> Result<&[u8]> {
        self.labels(kind).ok_or(Error::MissingLabels(kind.name()))
    }

    pub fn with_predicted(mut self, predicted: Vec<u8>) -> Result<Self> {
        if predicted.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "predicted labels",
                expected: self.len(),
                got: predicted.len(),
            });
        }
        self.predicted = Some(predicted);
        Ok(self)
    }

    /// Rows at `indices`, in that order, with every label vector carried
    /// along. Returns `None` for an empty selection.
    pub fn subset(&self, indices: &[usize]) -> Option<LabeledSample> {
        let features = self.features.select(indices)?;
        let pick = |v: &Option<Vec<u8>>| {
            v.as_ref()
                .map(|labels| indices.iter().map(|&i| labels[i]).collect())
        };
        Some(LabeledSample {
            features,
            sensitive: pick(&self.sensitive),
            target: pick(&self.target),
            predicted: pick(&self.predicted),
        })
    }

    /// Indices of rows whose `kind` label equals `value`.
    pub fn indices_where(&self, kind: LabelKind, value: u8) -> Result<Vec<usize>> {
        let labels = self.require(kind)?;
        Ok(labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == value)
            .map(|(i, _)| i)
            .collect())
    }

    /// Fraction of rows with `kind` label 1.
    pub fn prevalence(&self, kind: LabelKind) -> Result<Prevalence> {
        let labels = self.require(kind)?;
        Ok(Prevalence::from_labels(labels))
    }

    /// Number of rows per label value `[#0, #1]`.
    pub fn class_counts(&self, kind: LabelKind) -> Result<[usize; 2]> {
        let labels = self.require(kind)?;
        let ones = labels.iter().filter(|&&l| l == POSITIVE).count();
        Ok([labels.len() - ones, ones])
    }
}

/// Checks the structural invariants of a sample: label lengths, label
/// domain, finite features. Returns the first violation found.
pub fn validate_sample(sample: &LabeledSample) -> Result<()> {
    let rows = sample.features.rows();
    if rows == 0 || sample.features.cols() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if sample.features.values().len() != rows * sample.features.cols() {
        return Err(Error::LengthMismatch {
            what: "feature values",
            expected: rows * sample.features.cols(),
            got: sample.features.values().len(),
        });
    }
    for kind in [LabelKind::Sensitive, LabelKind::Target, LabelKind::Predicted] {
        if let Some(labels) = sample.labels(kind) {
            if labels.len() != rows {
                return Err(Error::LengthMismatch {
                    what: kind.name(),
                    expected: rows,
                    got: labels.len(),
                });
            }
        }
    }
    sample.features.check_finite()?;
    for kind in [LabelKind::Sensitive, LabelKind::Target, LabelKind::Predicted] {
        if let Some(labels) = sample.labels(kind) {
            if let Some((row, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
                return Err(Error::InvalidLabel {
                    what: kind.name(),
                    row,
                    value,
                });
            }
        }
    }
    Ok(())
}

/// Relative frequency of class 1 together with the count it was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prevalence {
    pub value: f64,
    pub support: usize,
}

impl Prevalence {
    /// Clamps `value` into `[0, 1]`.
    pub fn new(value: f64, support: usize) -> Self {
        Prevalence {
            value: value.clamp(0.0, 1.0),
            support,
        }
    }

    pub fn from_labels(labels: &[u8]) -> Self {
        let ones = labels.iter().filter(|&&l| l == POSITIVE).count();
        let value = if labels.is_empty() {
            0.0
        } else {
            ones as f64 / labels.len() as f64
        };
        Prevalence {
            value,
            support: labels.len(),
        }
    }
}

/// Estimate for one prediction branch of the test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPrevalence {
    /// Quantifier output for `S=1` before smoothing.
    pub raw: f64,
    /// Laplace-smoothed estimate for `S=1`.
    pub smoothed: f64,
    /// Control prevalence of `S=1` in the matching auxiliary branch.
    pub control: f64,
    /// Number of test instances in the branch.
    pub size: usize,
}

impl BranchPrevalence {
    /// Smoothed estimate for sensitive value `s`.
    pub fn smoothed_for(&self, s: u8) -> f64 {
        if s == POSITIVE {
            self.smoothed
        } else {
            1.0 - self.smoothed
        }
    }
}

/// Estimated acceptance rates per group and the resulting disparity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdEstimate {
    pub mu1: f64,
    pub mu0: f64,
    /// `mu1 - mu0`.
    pub delta: f64,
    /// Test branch predicted `⊕`.
    pub positive_branch: BranchPrevalence,
    /// Test branch predicted `⊖`.
    pub negative_branch: BranchPrevalence,
    /// Fraction of the test set predicted `⊕`.
    pub pr_pos: f64,
    pub flags: Vec<String>,
}

/// Experimental protocol identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolKind {
    #[serde(rename = "sample-prev-d3-neg")]
    SamplePrevD3Neg,
    #[serde(rename = "sample-prev-d3-pos")]
    SamplePrevD3Pos,
    #[serde(rename = "sample-prev-d2-neg")]
    SamplePrevD2Neg,
    #[serde(rename = "sample-prev-d2-pos")]
    SamplePrevD2Pos,
    #[serde(rename = "sample-size-d2")]
    SampleSizeD2,
    #[serde(rename = "sample-prev-d1")]
    SamplePrevD1,
    #[serde(rename = "flip-prev-d1")]
    FlipPrevD1,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 7] = [
        ProtocolKind::SamplePrevD3Neg,
        ProtocolKind::SamplePrevD3Pos,
        ProtocolKind::SamplePrevD2Neg,
        ProtocolKind::SamplePrevD2Pos,
        ProtocolKind::SampleSizeD2,
        ProtocolKind::SamplePrevD1,
        ProtocolKind::FlipPrevD1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::SamplePrevD3Neg => "sample-prev-d3-neg",
            ProtocolKind::SamplePrevD3Pos => "sample-prev-d3-pos",
            ProtocolKind::SamplePrevD2Neg => "sample-prev-d2-neg",
            ProtocolKind::SamplePrevD2Pos => "sample-prev-d2-pos",
            ProtocolKind::SampleSizeD2 => "sample-size-d2",
            ProtocolKind::SamplePrevD1 => "sample-prev-d1",
            ProtocolKind::FlipPrevD1 => "flip-prev-d1",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown protocol `{s}`")))
    }
}

/// One repetition's signed estimation error with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub dataset: String,
    pub protocol: ProtocolKind,
    /// Grid value: target prevalence, sample size, or `Pr(Y=S)`.
    pub parameter: f64,
    pub split_id: usize,
    pub permutation_id: usize,
    pub repeat_id: usize,
    pub method: String,
    /// `estimated_dd - true_dd`.
    pub signed_error: f64,
    pub true_dd: f64,
    pub estimated_dd: f64,
    pub seed: u64,
    /// Fingerprint of the three-way split this record was computed on.
    pub split_hash: u64,
    /// Non-fatal conditions hit while producing this record.
    #[serde(default)]
    pub flags: Vec<String>,
}

impl ErrorRecord {
    /// Key that pairs records of different methods for significance tests.
    pub fn pairing_key(&self) -> (usize, usize, usize, u64) {
        (
            self.split_id,
            self.permutation_id,
            self.repeat_id,
            self.parameter.to_bits(),
        )
    }
}
