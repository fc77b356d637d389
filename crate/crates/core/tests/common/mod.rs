#![allow(dead_code)]

use std::collections::HashMap;

use metakit::escalc::{compute_dataset, EsInput, Measure2x2, TwoByTwo};
use metakit::ingest::Dataset;
use nalgebra::DVector;
use serde_json::Value;

pub fn workspace_path(rel: &str) -> String {
    format!("{}/../../{rel}", env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture_path(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture_json(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture_path(name)).unwrap()).unwrap()
}

pub fn bcg_raw() -> Dataset {
    Dataset::load_csv(workspace_path("data/bcg.csv"), &HashMap::new()).unwrap()
}

/// BCG with log risk ratios in yi/vi/sei.
pub fn bcg() -> Dataset {
    let input = EsInput::TwoByTwo {
        measure: Measure2x2::LogRR,
        a: "tpos".into(),
        b: "tneg".into(),
        c: "cpos".into(),
        d: "cneg".into(),
    };
    compute_dataset(&bcg_raw(), &input, None).unwrap().0
}

pub fn bcg_yv() -> (DVector<f64>, DVector<f64>) {
    let d = bcg();
    let y = DVector::from_iterator(13, d.real("yi").unwrap().iter().map(|v| v.unwrap()));
    let v = DVector::from_iterator(13, d.real("vi").unwrap().iter().map(|v| v.unwrap()));
    (y, v)
}

pub fn bcg_tables() -> Vec<TwoByTwo> {
    let d = bcg_raw();
    let col = |n: &str| {
        d.real(n)
            .unwrap()
            .iter()
            .map(|v| v.unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b, c, dd) = (col("tpos"), col("tneg"), col("cpos"), col("cneg"));
    (0..a.len())
        .map(|i| TwoByTwo::new(a[i], b[i], c[i], dd[i]))
        .collect()
}

pub fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

pub fn assert_rel(what: &str, ours: f64, theirs: f64, rel: f64) {
    let tol = rel * theirs.abs().max(1e-12);
    assert!(
        (ours - theirs).abs() <= tol,
        "{what}: ours {ours} vs oracle {theirs} (rel tol {rel})"
    );
}

pub fn assert_abs(what: &str, ours: f64, theirs: f64, abs: f64) {
    assert!(
        (ours - theirs).abs() <= abs,
        "{what}: ours {ours} vs oracle {theirs} (abs tol {abs})"
    );
}
