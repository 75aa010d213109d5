mod common;

use std::path::PathBuf;

use common::rng;
use qfair::data::LabelKind;
use qfair::ingest::*;
use qfair::linear::{ClassWeighting, TrainerConfig};
use rand::Rng;

fn schema_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{name}.toml"))
}

#[test]
fn shipped_schemas_parse() {
    for name in ["adult", "compas", "creditcard"] {
        let schema = DatasetSchema::from_path(&schema_path(name)).unwrap();
        assert_eq!(schema.name, name);
    }
    let adult = DatasetSchema::from_path(&schema_path("adult")).unwrap();
    for dropped in ["fnlwgt", "educational-num", "relationship"] {
        assert!(adult.drop.iter().any(|d| d == dropped));
        assert!(!adult.categorical.iter().chain(&adult.numeric).any(|c| c == dropped));
    }
}

const SCHEMA: &str = r#"
name = "random"
numeric = ["a", "b"]
categorical = ["c", "d"]

[target]
column = "y"
positive = ["yes"]

[sensitive]
column = "s"
positive = ["m"]
"#;

#[test]
fn standardized_columns_and_indicators() {
    let mut r = rng(1);
    let mut csv = String::from("a,b,c,d,s,y\n");
    for _ in 0..500 {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.gen_range(-50.0..300.0),
            r.gen_range(0..7),
            ["x", "y", "z"][r.gen_range(0..3)],
            ["p", "q"][r.gen_range(0..2)],
            ["m", "f"][r.gen_range(0..2)],
            ["yes", "no"][r.gen_range(0..2)],
        );
    }
    let schema = DatasetSchema::from_toml_str(SCHEMA).unwrap();
    let loaded = load_dataset(&schema, csv.as_bytes()).unwrap();
    let x = &loaded.sample.features;
    assert_eq!(x.cols(), 2 + 3 + 2);
    let n = x.rows() as f64;
    for j in 0..2 {
        let col: Vec<f64> = x.iter_rows().map(|row| row[j]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
    for row in x.iter_rows() {
        assert_eq!(row[2..5].iter().sum::<f64>(), 1.0);
        assert_eq!(row[5..7].iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn malformed_rows_name_their_line() {
    let schema = DatasetSchema::from_toml_str(SCHEMA).unwrap();
    let csv = "a,b,c,d,s,y\n1,2,x,p,m,yes\n1,oops,x,p,f,no\n";
    let err = load_dataset(&schema, csv.as_bytes()).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
}

#[test]
fn uninformative_features_give_majority_accuracy() {
    let spec = SyntheticSpec::with_shifts(4000, 3, [0.1, 0.25, 0.3, 0.35], [0.0; 4], 5);
    let data = generate_synthetic(&spec).unwrap();
    let half: Vec<usize> = (0..2000).collect();
    let rest: Vec<usize> = (2000..4000).collect();
    let (train, test) = (data.subset(&half).unwrap(), data.subset(&rest).unwrap());
    let trainer = TrainerConfig { class_weighting: ClassWeighting::None, ..TrainerConfig::default() };
    let model = trainer.train(&train, LabelKind::Target, 0).unwrap().model;
    let y = test.target.as_deref().unwrap();
    let pred = model.predict(&test.features, 0.5).unwrap();
    let acc = pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    let majority = 0.25 + 0.35;
    assert!((acc - majority).abs() < 0.03, "accuracy {acc}");
}

/// Runs only when `$QF_DATA_DIR/adult.csv` is present.
#[test]
fn adult_summary_when_available() {
    let Some(dir) = std::env::var_os("QF_DATA_DIR") else { return };
    let csv = PathBuf::from(dir).join("adult.csv");
    if !csv.is_file() {
        return;
    }
    let schema = DatasetSchema::from_path(&schema_path("adult")).unwrap();
    let loaded = load_dataset(&schema, std::fs::File::open(csv).unwrap()).unwrap();
    let summary = DatasetSummary::of("adult", &loaded.sample).unwrap();
    assert_eq!(summary.rows, 45_222);
    assert!((summary.pr_sensitive - 0.675).abs() < 5e-4);
    assert!((summary.pr_target - 0.248).abs() < 5e-4);
}
