//! Dataset loading, preprocessing and synthetic data generation.
//!
//! A [`DatasetSchema`] describes which CSV columns hold the target and the
//! sensitive attribute, which columns are numeric (standardized) or
//! categorical (dummy-encoded), and which rows to keep. Rows with a missing
//! value in any used column are removed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabeledSample};
use crate::error::{Error, Result};
use crate::seeding;

/// Binary column mapping: cells equal to any of `positive` map to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryColumn {
    pub column: String,
    pub positive: Vec<String>,
}

/// Row predicate evaluated on the raw (trimmed) cell text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Eq { value: String },
    Ne { value: String },
    In { values: Vec<String> },
    NotIn { values: Vec<String> },
    /// Inclusive numeric range.
    Between { min: f64, max: f64 },
}

impl Predicate {
    fn accepts(&self, cell: &str) -> bool {
        match self {
            Predicate::Eq { value } => cell == value,
            Predicate::Ne { value } => cell != value,
            Predicate::In { values } => values.iter().any(|v| v == cell),
            Predicate::NotIn { values } => !values.iter().any(|v| v == cell),
            Predicate::Between { min, max } => cell
                .parse::<f64>()
                .map(|x| x >= *min && x <= *max)
                .unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub column: String,
    #[serde(flatten)]
    pub predicate: Predicate,
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".to_string(), "NA".to_string()]
}

/// Declarative preprocessing recipe for one tabular dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub target: BinaryColumn,
    pub sensitive: BinaryColumn,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub drop: Vec<String>,
    /// Cell texts treated as missing values.
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
    #[serde(default, rename = "filter")]
    pub filters: Vec<RowFilter>,
}

impl DatasetSchema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: DatasetSchema =
            toml::from_str(text).map_err(|e| Error::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.numeric.is_empty() && self.categorical.is_empty() {
            return Err(Error::InvalidSchema("no feature columns".into()));
        }
        let mut seen = HashSet::new();
        let all = [&self.target.column, &self.sensitive.column]
            .into_iter()
            .chain(&self.numeric)
            .chain(&self.categorical)
            .chain(&self.drop);
        for column in all {
            if !seen.insert(column.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "column `{column}` listed more than once"
                )));
            }
        }
        if self.target.positive.is_empty() || self.sensitive.positive.is_empty() {
            return Err(Error::InvalidSchema(
                "target and sensitive mappings need at least one positive value".into(),
            ));
        }
        Ok(())
    }

    fn used_columns(&self) -> impl Iterator<Item = &String> {
        [&self.target.column, &self.sensitive.column]
            .into_iter()
            .chain(&self.numeric)
            .chain(&self.categorical)
    }
}

/// Statistics fitted at load time, reusable on later loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: DatasetSchema,
    /// `(column, mean, std)` for each retained numeric column.
    pub numeric: Vec<(String, f64, f64)>,
    /// `(column, sorted categories)` for each retained categorical column.
    pub categorical: Vec<(String, Vec<String>)>,
}

impl Preprocessor {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.numeric.iter().map(|(c, _, _)| c.clone()).collect();
        for (column, cats) in &self.categorical {
            names.extend(cats.iter().map(|c| format!("{column}={c}")));
        }
        names
    }

    pub fn n_features(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|(_, c)| c.len()).sum::<usize>()
    }

    /// Applies the fitted statistics to a new CSV source.
    pub fn transform<R: Read>(&self, source: R) -> Result<LabeledSample> {
        let table = RawTable::read(&self.schema, source)?;
        self.encode(&table)
    }

    fn encode(&self, table: &RawTable) -> Result<LabeledSample> {
        let cols = self.n_features();
        if cols == 0 {
            return Err(Error::InvalidSchema(
                "no informative feature columns left".into(),
            ));
        }
        let mut values = Vec::with_capacity(table.rows.len() * cols);
        let numeric_idx: Vec<usize> = self
            .numeric
            .iter()
            .map(|(c, _, _)| table.column(c))
            .collect::<Result<_>>()?;
        let cat_idx: Vec<usize> = self
            .categorical
            .iter()
            .map(|(c, _)| table.column(c))
            .collect::<Result<_>>()?;
        for row in &table.rows {
            for ((column, mean, std), &j) in self.numeric.iter().zip(&numeric_idx) {
                let x = parse_number(&row.cells[j], row.line, column)?;
                values.push((x - mean) / std);
            }
            for ((column, cats), &j) in self.categorical.iter().zip(&cat_idx) {
                let cell = &row.cells[j];
                let hit = cats
                    .iter()
                    .position(|c| c == cell)
                    .ok_or_else(|| Error::UnseenCategory {
                        column: column.clone(),
                        value: cell.clone(),
                    })?;
                values.extend((0..cats.len()).map(|k| if k == hit { 1.0 } else { 0.0 }));
            }
        }
        let features = FeatureMatrix::new(table.rows.len(), cols, values)?;
        let t = table.column(&self.schema.target.column)?;
        let s = table.column(&self.schema.sensitive.column)?;
        let map = |j: usize, spec: &BinaryColumn| -> Vec<u8> {
            table
                .rows
                .iter()
                .map(|r| u8::from(spec.positive.iter().any(|p| *p == r.cells[j])))
                .collect()
        };
        LabeledSample::new(
            features,
            Some(map(s, &self.schema.sensitive)),
            Some(map(t, &self.schema.target)),
        )
    }
}

/// Counts of what happened during a load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_filtered: usize,
    pub rows_missing: usize,
    pub rows_kept: usize,
    /// Columns dropped because they were constant after filtering.
    pub constant_columns: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub sample: LabeledSample,
    pub preprocessor: Preprocessor,
    pub report: LoadReport,
}

struct RawRow {
    line: usize,
    cells: Vec<String>,
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<RawRow>,
    report: LoadReport,
}

impl RawTable {
    /// Reads the CSV, applies row filters and drops rows with missing values
    /// in used columns. Cells are trimmed.
    fn read<R: Read>(schema: &DatasetSchema, source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(source);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let find = |c: &str| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::MissingColumn(c.to_string()))
        };
        for column in schema
            .used_columns()
            .chain(&schema.drop)
            .chain(schema.filters.iter().map(|f| &f.column))
        {
            find(column)?;
        }
        let used: Vec<usize> = schema
            .used_columns()
            .map(|c| find(c))
            .collect::<Result<_>>()?;
        let filters: Vec<(usize, &Predicate)> = schema
            .filters
            .iter()
            .map(|f| find(&f.column).map(|j| (j, &f.predicate)))
            .collect::<Result<_>>()?;

        let mut report = LoadReport::default();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Csv(format!("line {line}: {e}"))
            })?;
            report.rows_read += 1;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != header.len() {
                return Err(Error::Csv(format!(
                    "line {line}: expected {} fields, found {}",
                    header.len(),
                    record.len()
                )));
            }
            if !filters.iter().all(|(j, p)| p.accepts(&record[*j])) {
                report.rows_filtered += 1;
                continue;
            }
            if used.iter().any(|&j| schema.missing.iter().any(|m| *m == record[j])) {
                report.rows_missing += 1;
                continue;
            }
            rows.push(RawRow {
                line,
                cells: record.iter().map(str::to_string).collect(),
            });
        }
        report.rows_kept = rows.len();
        Ok(RawTable {
            header,
            rows,
            report,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }
}

fn parse_number(cell: &str, line: usize, column: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::UnparseableCell {
            line,
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}

/// Loads a CSV source according to `schema`: filters rows, removes rows with
/// missing values, standardizes numeric columns over the loaded set and
/// dummy-encodes categorical ones (one indicator per observed category).
///
/// Constant columns are dropped with a warning.
pub fn load_dataset<R: Read>(schema: &DatasetSchema, source: R) -> Result<LoadedDataset> {
    schema.validate()?;
    let table = RawTable::read(schema, source)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let mut report = table.report.clone();
    let n = table.rows.len() as f64;

    let mut numeric = Vec::new();
    for column in &schema.numeric {
        let j = table.column(column)?;
        let xs: Vec<f64> = table
            .rows
            .iter()
            .map(|r| parse_number(&r.cells[j], r.line, column))
            .collect::<Result<_>>()?;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            warn!("dropping constant numeric column `{column}`");
            report.constant_columns.push(column.clone());
            continue;
        }
        numeric.push((column.clone(), mean, var.sqrt()));
    }

    let mut categorical = Vec::new();
    for column in &schema.categorical {
        let j = table.column(column)?;
        let cats: BTreeSet<&str> = table.rows.iter().map(|r| r.cells[j].as_str()).collect();
        if cats.len() < 2 {
            warn!("dropping constant categorical column `{column}`");
            report.constant_columns.push(column.clone());
            continue;
        }
        categorical.push((column.clone(), cats.into_iter().map(str::to_string).collect()));
    }

    let preprocessor = Preprocessor {
        schema: schema.clone(),
        numeric,
        categorical,
    };
    let sample = preprocessor.encode(&table)?;
    Ok(LoadedDataset {
        sample,
        preprocessor,
        report,
    })
}

/// Summary statistics of a loaded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub rows: usize,
    pub features: usize,
    pub pr_sensitive: f64,
    pub pr_target: f64,
}

impl DatasetSummary {
    pub fn of(name: &str, sample: &LabeledSample) -> Result<Self> {
        Ok(DatasetSummary {
            name: name.to_string(),
            rows: sample.len(),
            features: sample.features.cols(),
            pr_sensitive: sample.prevalence(crate::data::LabelKind::Sensitive)?.value,
            pr_target: sample.prevalence(crate::data::LabelKind::Target)?.value,
        })
    }
}

/// Writes a preprocessed sample as CSV: `s,y,<features...>`.
pub fn write_prepared<W: Write>(
    sample: &LabeledSample,
    feature_names: &[String],
    out: W,
) -> Result<()> {
    let s = sample.require(crate::data::LabelKind::Sensitive)?;
    let y = sample.require(crate::data::LabelKind::Target)?;
    if feature_names.len() != sample.features.cols() {
        return Err(Error::LengthMismatch {
            what: "feature names",
            expected: sample.features.cols(),
            got: feature_names.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["s".to_string(), "y".to_string()];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in sample.features.iter_rows().enumerate() {
        let mut rec = vec![s[i].to_string(), y[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_prepared`]. Returns the sample and the
/// feature names.
pub fn read_prepared<R: Read>(source: R) -> Result<(LabeledSample, Vec<String>)> {
    let mut reader = csv::Reader::from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "s" || header[1] != "y" {
        return Err(Error::Parse(
            "prepared dataset must start with columns `s,y`".into(),
        ));
    }
    let cols = header.len() - 2;
    let (mut s, mut y, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let label = |k: usize| -> Result<u8> {
            record[k].parse::<u8>().map_err(|_| Error::UnparseableCell {
                line,
                column: header[k].clone(),
                value: record[k].to_string(),
            })
        };
        s.push(label(0)?);
        y.push(label(1)?);
        for k in 2..header.len() {
            values.push(parse_number(&record[k], line, &header[k])?);
        }
    }
    if s.is_empty() {
        return Err(Error::EmptySample);
    }
    let features = FeatureMatrix::new(s.len(), cols, values)?;
    let sample = LabeledSample::new(features, Some(s), Some(y))?;
    Ok((sample, header[2..].to_vec()))
}

/// Parameters of a synthetic dataset with Gaussian features per `(S, Y)`
/// cell. Cells are ordered `(s=0,y=0), (s=0,y=1), (s=1,y=0), (s=1,y=1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub cell_probs: [f64; 4],
    /// Mean vector (length `dim`) of the unit-variance Gaussian per cell.
    pub cell_means: [Vec<f64>; 4],
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn cell_index(s: u8, y: u8) -> usize {
        usize::from(s) * 2 + usize::from(y)
    }

    /// Every feature of cell `c` has mean `shifts[c]`.
    pub fn with_shifts(n: usize, dim: usize, cell_probs: [f64; 4], shifts: [f64; 4], seed: u64) -> Self {
        SyntheticSpec {
            n,
            dim,
            cell_probs,
            cell_means: shifts.map(|m| vec![m; dim]),
            seed,
        }
    }

    /// The first half of the features separate the sensitive groups by
    /// `s_gap`, the rest separate the target classes by `y_gap`.
    pub fn separated(n: usize, dim: usize, cell_probs: [f64; 4], s_gap: f64, y_gap: f64, seed: u64) -> Self {
        let half = dim.div_ceil(2);
        let mean = |s: u8, y: u8| -> Vec<f64> {
            (0..dim)
                .map(|j| {
                    if j < half {
                        (f64::from(s) - 0.5) * s_gap
                    } else {
                        (f64::from(y) - 0.5) * y_gap
                    }
                })
                .collect()
        };
        SyntheticSpec {
            n,
            dim,
            cell_probs,
            cell_means: [mean(0, 0), mean(0, 1), mean(1, 0), mean(1, 1)],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidSpec(format!("n = {} < 4", self.n)));
        }
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dim must be positive".into()));
        }
        if self.cell_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidSpec("cell probabilities outside [0,1]".into()));
        }
        let total: f64 = self.cell_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "cell probabilities sum to {total}, not 1"
            )));
        }
        for m in &self.cell_means {
            if m.len() != self.dim || m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(
                    "each cell mean must have `dim` finite entries".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws `(S, Y)` cells multinomially and features from unit-variance
/// Gaussians around the cell means. Deterministic given `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledSample> {
    spec.validate()?;
    let mut rng = seeding::rng(spec.seed);
    let mut cumulative = [0.0; 4];
    let mut acc = 0.0;
    for (c, p) in spec.cell_probs.iter().enumerate() {
        acc += p;
        cumulative[c] = acc;
    }
    let (mut s, mut y) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n));
    let mut values = Vec::with_capacity(spec.n * spec.dim);
    for _ in 0..spec.n {
        let u: f64 = rng.gen::<f64>() * acc;
        let cell = cumulative.iter().position(|&c| u < c).unwrap_or_else(|| {
            // u == acc can only happen through rounding; take the last non-empty cell
            spec.cell_probs.iter().rposition(|&p| p > 0.0).unwrap_or(3)
        });
        s.push((cell / 2) as u8);
        y.push((cell % 2) as u8);
        for &m in &spec.cell_means[cell] {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(m + z);
        }
    }
    let features = FeatureMatrix::new(spec.n, spec.dim, values)?;
    LabeledSample::new(features, Some(s), Some(y))
}

/// Empirical `(S, Y)` cell counts in the cell order of [`SyntheticSpec`].
pub fn cell_counts(sample: &LabeledSample) -> Result<[usize; 4]> {
    let s = sample.require(crate::data::LabelKind::Sensitive)?;
    let y = sample.require(crate::data::LabelKind::Target)?;
    let mut counts = [0; 4];
    for (&si, &yi) in s.iter().zip(y) {
        counts[SyntheticSpec::cell_index(si, yi)] += 1;
    }
    Ok(counts)
}

/// Category frequencies of one raw column, mainly for diagnostics.
pub fn column_levels<R: Read>(source: R, column: &str) -> Result<BTreeMap<String, usize>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let j = reader
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::MissingColumn(column.to_string()))?;
    let mut levels = BTreeMap::new();
    for record in reader.records() {
        *levels.entry(record?[j].to_string()).or_insert(0) += 1;
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelKind;

    const TOY_SCHEMA: &str = r#"
name = "toy"
numeric = ["age", "hours"]
categorical = ["work"]
drop = ["id"]
missing = ["?", ""]

[target]
column = "income"
positive = [">50K"]

[sensitive]
column = "sex"
positive = ["Male"]

[[filter]]
column = "country"
op = "ne"
value = "Nowhere"
"#;

    const TOY_CSV: &str = "\
id,age,hours,work,sex,income,country
1,25,40,Private,Male,>50K,US
2,35,50,Gov,Female,<=50K,US
3,45,?,Private,Female,<=50K,US
4,55,20,Self,Male,>50K,Nowhere
5,65,30,Gov,Male,<=50K,US
";

    #[test]
    fn loads_filters_and_encodes() {
        let schema = DatasetSchema::from_toml_str(TOY_SCHEMA).unwrap();
        let loaded = load_dataset(&schema, TOY_CSV.as_bytes()).unwrap();
        let r = &loaded.report;
        assert_eq!((r.rows_read, r.rows_filtered, r.rows_missing, r.rows_kept), (5, 1, 1, 3));
        let sample = &loaded.sample;
        assert_eq!(sample.len(), 3);
        // 2 numeric + {Gov, Private}
        assert_eq!(sample.features.cols(), 4);
        assert_eq!(
            loaded.preprocessor.feature_names(),
            vec!["age", "hours", "work=Gov", "work=Private"]
        );
        assert_eq!(sample.sensitive.as_deref().unwrap(), &[1, 0, 1]);
        assert_eq!(sample.target.as_deref().unwrap(), &[1, 0, 0]);
        for j in 0..2 {
            let col: Vec<f64> = sample.features.iter_rows().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        }
        for row in sample.features.iter_rows() {
            assert_eq!(row[2] + row[3], 1.0);
        }
    }

    #[test]
    fn all_rows_missing_is_empty_after_filtering() {
        let schema = DatasetSchema::from_toml_str(TOY_SCHEMA).unwrap();
        let csv = "id,age,hours,work,sex,income,country\n1,?,40,Private,Male,>50K,US\n2,3,,Gov,Male,>50K,US\n";
        assert_eq!(
            load_dataset(&schema, csv.as_bytes()).unwrap_err(),
            Error::EmptyAfterFiltering
        );
    }

    #[test]
    fn missing_column_and_bad_cell_are_reported() {
        let schema = DatasetSchema::from_toml_str(TOY_SCHEMA).unwrap();
        let csv = "id,age,work,sex,income,country\n1,25,Private,Male,>50K,US\n";
        assert_eq!(
            load_dataset(&schema, csv.as_bytes()).unwrap_err(),
            Error::MissingColumn("hours".into())
        );
        let csv = "id,age,hours,work,sex,income,country\n1,25,40,Private,Male,>50K,US\n2,abc,40,Gov,Male,>50K,US\n";
        match load_dataset(&schema, csv.as_bytes()).unwrap_err() {
            Error::UnparseableCell { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "age");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unseen_category_on_reload_is_an_error() {
        let schema = DatasetSchema::from_toml_str(TOY_SCHEMA).unwrap();
        let loaded = load_dataset(&schema, TOY_CSV.as_bytes()).unwrap();
        let later = "id,age,hours,work,sex,income,country\n9,30,40,Unknown,Male,>50K,US\n";
        assert!(matches!(
            loaded.preprocessor.transform(later.as_bytes()),
            Err(Error::UnseenCategory { .. })
        ));
    }

    #[test]
    fn constant_columns_are_dropped() {
        let schema = DatasetSchema::from_toml_str(TOY_SCHEMA).unwrap();
        let csv = "id,age,hours,work,sex,income,country\n1,25,40,Gov,Male,>50K,US\n2,35,40,Private,Female,<=50K,US\n";
        let loaded = load_dataset(&schema, csv.as_bytes()).unwrap();
        assert_eq!(loaded.report.constant_columns, vec!["hours".to_string()]);
        assert_eq!(loaded.sample.features.cols(), 3);
    }

    #[test]
    fn duplicate_schema_columns_are_rejected() {
        let bad = TOY_SCHEMA.replace(r#"drop = ["id"]"#, r#"drop = ["age"]"#);
        assert!(matches!(
            DatasetSchema::from_toml_str(&bad),
            Err(Error::InvalidSchema(_))
        ));
    }

    #[test]
    fn prepared_file_round_trips_exactly() {
        let schema = DatasetSchema::from_toml_str(TOY_SCHEMA).unwrap();
        let loaded = load_dataset(&schema, TOY_CSV.as_bytes()).unwrap();
        let mut buf = Vec::new();
        let names = loaded.preprocessor.feature_names();
        write_prepared(&loaded.sample, &names, &mut buf).unwrap();
        let (back, back_names) = read_prepared(buf.as_slice()).unwrap();
        assert_eq!(back, loaded.sample);
        assert_eq!(back_names, names);
    }

    #[test]
    fn uniform_cells_match_their_probabilities() {
        let spec = SyntheticSpec::with_shifts(4000, 3, [0.25; 4], [0.0, 1.0, 2.0, 3.0], 7);
        let sample = generate_synthetic(&spec).unwrap();
        let counts = cell_counts(&sample).unwrap();
        for c in counts {
            assert!((c as f64 / 4000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::separated(200, 4, [0.1, 0.2, 0.3, 0.4], 2.0, 1.0, 11);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::with_shifts(100, 2, [0.25; 4], [0.0; 4], 1);
        spec.cell_probs = [0.25, 0.25, 0.25, 0.2];
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidSpec(_))));
        let spec = SyntheticSpec::with_shifts(3, 2, [0.25; 4], [0.0; 4], 1);
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn sensitive_prevalence_follows_cells() {
        let spec = SyntheticSpec::with_shifts(5000, 1, [0.4, 0.2, 0.1, 0.3], [0.0; 4], 3);
        let sample = generate_synthetic(&spec).unwrap();
        let p = sample.prevalence(LabelKind::Sensitive).unwrap().value;
        assert!((p - 0.4).abs() < 0.03);
    }
}
