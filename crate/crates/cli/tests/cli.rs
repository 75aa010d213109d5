use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const METHODS: &str = r#"["CC", "PCC", "ACC", "PACC", "SLD", "HDy", "MLPE"]"#;

fn qfair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfair"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("QF_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, protocol: &str, grid: &str, methods: &str) -> PathBuf {
    let text = format!(
        r#"seed = 7

[dataset.synthetic]
n = 3000
dim = 4
cell_probs = [0.3, 0.2, 0.2, 0.3]
s_gap = 1.5
y_gap = 2.0
seed = 3

[protocol]
protocols = ["{protocol}"]
n_splits = 1
n_repeats = 2
sample_size = 100
grid = {grid}

[pipeline]
methods = {methods}
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(Result::unwrap).collect()
}

fn header_index(path: &Path, name: &str) -> usize {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn desk_run_writes_one_aggregate_row_per_method_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let grid = r#"{ kind = "values", values = [0.2, 0.5, 0.8] }"#;
    let config = write_config(tmp.path(), "sample-prev-d3-neg", grid, METHODS);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = config.to_str().unwrap();
    let o = qfair(&["run", "--config", cfg, "--out", a.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = qfair(&["run", "--config", cfg, "--out", b.to_str().unwrap(), "--jobs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let agg = csv_rows(&a.join("aggregate.csv"));
    assert_eq!(agg.len(), 7);
    let failures = std::fs::read_to_string(a.join("failures.jsonl")).unwrap();
    let records = csv_rows(&a.join("records.csv"));
    // grid x splits x permutations x repeats x methods
    assert!(failures.is_empty(), "{failures}");
    assert_eq!(records.len(), 3 * 6 * 2 * 7);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["expected_records"], 3 * 6 * 2 * 7);

    for name in ["records.csv", "records.jsonl", "failures.jsonl", "aggregate.csv", "boxplots.csv", "run.json"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn report_on_one_grid_point_gives_one_box_per_method() {
    let tmp = TempDir::new().unwrap();
    let grid = r#"{ kind = "values", values = [0.5] }"#;
    let config = write_config(tmp.path(), "sample-prev-d1", grid, r#"["CC", "SLD", "Oracle"]"#);
    let out = tmp.path().join("out");
    let o = qfair(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summaries = tmp.path().join("summaries");
    let o = qfair(&["report", "--input", out.to_str().unwrap(), "--out", summaries.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let boxes = summaries.join("boxplots.csv");
    let rows = csv_rows(&boxes);
    assert_eq!(rows.len(), 3);
    let m = header_index(&boxes, "method");
    let mut methods: Vec<&str> = rows.iter().map(|r| &r[m]).collect();
    methods.sort();
    assert_eq!(methods, ["CC", "Oracle", "SLD"]);
    assert_eq!(
        std::fs::read(out.join("aggregate.csv")).unwrap(),
        std::fs::read(summaries.join("aggregate.csv")).unwrap()
    );
}

#[test]
fn decouple_pacc_matches_cc_on_classification() {
    let tmp = TempDir::new().unwrap();
    let grid = r#"{ kind = "values", values = [0.3, 0.7] }"#;
    let config = write_config(tmp.path(), "sample-prev-d2-neg", grid, r#"["CC", "PACC"]"#);
    let out = tmp.path().join("out");
    let o = qfair(&["decouple", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = out.join("decoupling_summary.csv");
    let rows = csv_rows(&path);
    let (m, p) = (header_index(&path, "method"), header_index(&path, "parameter"));
    let (acc, f1) = (header_index(&path, "accuracy"), header_index(&path, "f1"));
    for cc in rows.iter().filter(|r| &r[m] == "CC") {
        let pacc = rows.iter().find(|r| &r[m] == "PACC" && r[p] == cc[p]).unwrap();
        assert_eq!(cc[acc], pacc[acc]);
        assert_eq!(cc[f1], pacc[f1]);
    }
}

#[test]
fn decouple_with_a_perfect_classifier_is_exact() {
    let tmp = TempDir::new().unwrap();
    let grid = r#"{ kind = "values", values = [0.2, 0.5, 0.8] }"#;
    let config = write_config(tmp.path(), "sample-prev-d3-pos", grid, r#"["CC", "PACC", "SLD"]"#);
    let text = std::fs::read_to_string(&config).unwrap().replace("s_gap = 1.5", "s_gap = 40.0");
    std::fs::write(&config, text).unwrap();
    let out = tmp.path().join("out");
    let o = qfair(&["decouple", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = out.join("decoupling_summary.csv");
    let (m, mae) = (header_index(&path, "method"), header_index(&path, "mae"));
    let (acc, f1) = (header_index(&path, "accuracy"), header_index(&path, "f1"));
    let rows = csv_rows(&path);
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert_eq!(r[acc].parse::<f64>().unwrap(), 1.0, "{r:?}");
        assert_eq!(r[f1].parse::<f64>().unwrap(), 1.0, "{r:?}");
        let err = r[mae].parse::<f64>().unwrap();
        // soft posteriors only approach 0/1 under L2 regularization, and
        // SLD stops at its EM tolerance
        if &r[m] == "CC" {
            assert_eq!(err, 0.0, "{r:?}");
        } else {
            assert!(err < 1e-4, "{r:?}");
        }
    }
}

#[test]
fn decouple_rejects_methods_without_labels() {
    let tmp = TempDir::new().unwrap();
    let grid = r#"{ kind = "values", values = [0.5] }"#;
    let config = write_config(tmp.path(), "sample-prev-d2-neg", grid, r#"["HDy"]"#);
    let o = qfair(&["decouple", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("HDy"), "{}", stderr(&o));
}

#[test]
fn bad_configs_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let grid = r#"{ kind = "values", values = [0.5] }"#;
    let good = std::fs::read_to_string(write_config(tmp.path(), "sample-prev-d1", grid, METHODS)).unwrap();
    let cases = [
        good.replace("seed = 7", "sede = 7"),
        good.replace(r#""MLPE""#, r#""XYZ""#),
        good.replace("sample-prev-d1", "sample-prev-d9"),
        good.replace("n_repeats = 2", "n_repeats = 0"),
        good.replace("values = [0.5]", "values = [1.5]"),
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let o = qfair(&["run", "--config", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "case {i}: {}", stderr(&o));
    }
    let path = tmp.path().join("good.toml");
    std::fs::write(&path, &good).unwrap();
    let o = qfair(&["run", "--config", path.to_str().unwrap(), "--desk-scale", "--paper-scale"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qfair(&["run"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(qfair(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_csv_names_the_line() {
    let tmp = TempDir::new().unwrap();
    let schema = tmp.path().join("toy.toml");
    std::fs::write(
        &schema,
        r#"name = "toy"
numeric = ["a"]
categorical = ["c"]
target = { column = "y", positive = ["yes"] }
sensitive = { column = "s", positive = ["m"] }
"#,
    )
    .unwrap();
    let csv = tmp.path().join("toy.csv");
    std::fs::write(&csv, "a,c,s,y\n1,x,m,yes\n2,z,f,no\noops,x,f,no\n").unwrap();
    let o = qfair(&["prepare", "--schema", schema.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    let missing = tmp.path().join("absent.csv");
    let o = qfair(&["prepare", "--schema", schema.to_str().unwrap(), "--csv", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prepared_data_round_trips_into_a_run() {
    let tmp = TempDir::new().unwrap();
    let schema = tmp.path().join("toy.toml");
    std::fs::write(
        &schema,
        r#"name = "toy"
numeric = ["a", "b"]
target = { column = "y", positive = ["1"] }
sensitive = { column = "s", positive = ["1"] }
"#,
    )
    .unwrap();
    let mut text = String::from("a,b,s,y\n");
    for i in 0..1200u32 {
        let s = (i * 7 % 3 == 0) as u32;
        let y = (i * 11 % 5 < 2) as u32;
        let a = f64::from(s) * 2.0 + f64::from(i % 13) / 13.0;
        let b = f64::from(y) * 2.0 + f64::from(i % 17) / 17.0;
        text.push_str(&format!("{a},{b},{s},{y}\n"));
    }
    let csv = tmp.path().join("toy.csv");
    std::fs::write(&csv, text).unwrap();
    let prepared = tmp.path().join("prepared");
    let o = qfair(&["prepare", "--schema", schema.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--out", prepared.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(prepared.join("toy.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["rows"], 1200);
    assert_eq!(summary["summary"]["features"], 2);

    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        r#"out = "results"

[dataset]
prepared = "prepared/toy.prepared.csv"

[protocol]
protocols = ["sample-prev-d1"]
n_splits = 1
n_repeats = 1
sample_size = 50
grid = { kind = "values", values = [0.5] }

[pipeline]
methods = ["PACC"]
"#,
    )
    .unwrap();
    let o = qfair(&["run", "--config", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&tmp.path().join("results/records.csv")).len(), 6);
}

/// Runs only when `$QF_DATA_DIR/adult.csv` is present.
#[test]
fn adult_prepare_when_available() {
    let Some(dir) = std::env::var_os("QF_DATA_DIR") else { return };
    let csv = PathBuf::from(dir).join("adult.csv");
    if !csv.is_file() {
        return;
    }
    let schema = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/adult.toml");
    let tmp = TempDir::new().unwrap();
    let o = qfair(&["prepare", "--schema", schema.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("adult.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["rows"], 45_222);
    assert_eq!(summary["summary"]["features"], 84);
    let pr_s = summary["summary"]["pr_sensitive"].as_f64().unwrap();
    let pr_y = summary["summary"]["pr_target"].as_f64().unwrap();
    assert!((pr_s - 0.675).abs() < 5e-4, "{pr_s}");
    assert!((pr_y - 0.248).abs() < 5e-4, "{pr_y}");
}

/// Runs only when `$QF_DATA_DIR/creditcard.csv` is present.
#[test]
fn creditcard_prepare_when_available() {
    let Some(dir) = std::env::var_os("QF_DATA_DIR") else { return };
    let csv = PathBuf::from(dir).join("creditcard.csv");
    if !csv.is_file() {
        return;
    }
    let schema = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/creditcard.toml");
    let tmp = TempDir::new().unwrap();
    let o = qfair(&["prepare", "--schema", schema.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("creditcard.summary.json")).unwrap()).unwrap();
    let pr_y = summary["summary"]["pr_target"].as_f64().unwrap();
    assert!((pr_y - 0.779).abs() < 5e-4, "{pr_y}");
}
