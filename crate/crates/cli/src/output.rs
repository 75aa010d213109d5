//! Result files. Every writer is deterministic so that reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use qfair::data::{ErrorRecord, ProtocolKind};
use qfair::protocol::{aggregate, boxplot_series};
use serde::Serialize;

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path, e))?;
        writeln!(w).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// `records.csv` and `records.jsonl`. The CSV joins flags with `;`.
pub fn write_records(dir: &Path, records: &[ErrorRecord]) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Row<'a> {
        dataset: &'a str,
        protocol: ProtocolKind,
        parameter: f64,
        split_id: usize,
        permutation_id: usize,
        repeat_id: usize,
        method: &'a str,
        signed_error: f64,
        true_dd: f64,
        estimated_dd: f64,
        seed: u64,
        split_hash: String,
        flags: String,
    }
    let rows: Vec<Row> = records
        .iter()
        .map(|r| Row {
            dataset: &r.dataset,
            protocol: r.protocol,
            parameter: r.parameter,
            split_id: r.split_id,
            permutation_id: r.permutation_id,
            repeat_id: r.repeat_id,
            method: &r.method,
            signed_error: r.signed_error,
            true_dd: r.true_dd,
            estimated_dd: r.estimated_dd,
            seed: r.seed,
            split_hash: format!("{:016x}", r.split_hash),
            flags: r.flags.join(";"),
        })
        .collect();
    write_csv(&dir.join("records.csv"), &rows)?;
    write_jsonl(&dir.join("records.jsonl"), records)
}

pub fn read_records(path: &Path) -> Result<Vec<ErrorRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Protocols that are summarized together: both directions of a
/// prevalence sweep form one experiment.
pub fn family(protocol: ProtocolKind) -> &'static str {
    match protocol {
        ProtocolKind::SamplePrevD3Neg | ProtocolKind::SamplePrevD3Pos => "sample-prev-d3",
        ProtocolKind::SamplePrevD2Neg | ProtocolKind::SamplePrevD2Pos => "sample-prev-d2",
        other => other.name(),
    }
}

/// `aggregate.csv` (one row per dataset, protocol family and method) and
/// `boxplots.csv` (one row per protocol, method and grid point).
pub fn write_summaries(dir: &Path, records: &[ErrorRecord]) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct AggRow<'a> {
        dataset: &'a str,
        family: &'a str,
        method: &'a str,
        n: usize,
        mae: f64,
        mae_std: f64,
        mae_sig: &'a str,
        mse: f64,
        mse_std: f64,
        mse_sig: &'a str,
        p_ae_lt_01: f64,
        p_ae_lt_02: f64,
    }
    let mut families: BTreeMap<&str, Vec<ErrorRecord>> = BTreeMap::new();
    for r in records {
        families.entry(family(r.protocol)).or_default().push(r.clone());
    }
    let mut summaries = Vec::new();
    for (fam, recs) in &families {
        let rows = aggregate(recs).map_err(|e| CliError::Runtime(e.to_string()))?;
        summaries.extend(rows.into_iter().map(|r| (*fam, r)));
    }
    let agg: Vec<AggRow> = summaries
        .iter()
        .map(|(fam, r)| AggRow {
            dataset: &r.dataset,
            family: fam,
            method: &r.method,
            n: r.n,
            mae: r.mae,
            mae_std: r.mae_std,
            mae_sig: r.mae_significance.symbol(),
            mse: r.mse,
            mse_std: r.mse_std,
            mse_sig: r.mse_significance.symbol(),
            p_ae_lt_01: r.p_ae_lt_01,
            p_ae_lt_02: r.p_ae_lt_02,
        })
        .collect();
    write_csv(&dir.join("aggregate.csv"), &agg)?;

    #[derive(Serialize)]
    struct BoxRow<'a> {
        dataset: &'a str,
        protocol: ProtocolKind,
        method: &'a str,
        parameter: f64,
        n: usize,
        whisker_low: f64,
        q1: f64,
        median: f64,
        q3: f64,
        whisker_high: f64,
        outliers: String,
    }
    let series = boxplot_series(records).map_err(|e| CliError::Runtime(e.to_string()))?;
    let boxes: Vec<BoxRow> = series
        .iter()
        .map(|b| BoxRow {
            dataset: &b.dataset,
            protocol: b.protocol,
            method: &b.method,
            parameter: b.parameter,
            n: b.stats.n,
            whisker_low: b.stats.whisker_low,
            q1: b.stats.q1,
            median: b.stats.median,
            q3: b.stats.q3,
            whisker_high: b.stats.whisker_high,
            outliers: b.stats.outliers.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        })
        .collect();
    write_csv(&dir.join("boxplots.csv"), &boxes)
}
