use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(name)
}

fn metakit(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metakit"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn bundle(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("bundle.json")).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Copy bcg.csv into `dir` with `edit` applied to each parsed record, and a
/// config pointing at it.
fn bcg_variant(
    dir: &Path,
    yaml: &str,
    edit: impl Fn(usize, &mut Vec<String>, &[String]),
) -> PathBuf {
    let mut rdr = csv::Reader::from_path(root().join("data/bcg.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let mut w = csv::Writer::from_path(dir.join("bcg.csv")).unwrap();
    let mut h = header.clone();
    edit(usize::MAX, &mut h, &header);
    w.write_record(&h).unwrap();
    for (i, r) in rdr.records().enumerate() {
        let mut rec: Vec<String> = r.unwrap().iter().map(str::to_string).collect();
        edit(i, &mut rec, &header);
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
    let p = dir.join("config.yaml");
    std::fs::write(&p, yaml).unwrap();
    p
}

const LOGRR: &str = "effect_size:\n  compute:\n    - {type: two_by_two, measure: logRR, a: tpos, b: tneg, c: cpos, d: cneg}\n";

fn table<'a>(b: &'a Value, name: &str) -> &'a Vec<Value> {
    b["tables"][name]["rows"]
        .as_array()
        .unwrap_or_else(|| panic!("no table {name}"))
}

#[test]
fn es_counts_all_thirteen() {
    let dir = tempfile::tempdir().unwrap();
    let o = metakit(&["es"], &config("bcg_random_effects.yaml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("13 of 13"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("effect_sizes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 14);
    assert!(csv.lines().next().unwrap().ends_with(",yi,vi,sei"));
}

#[test]
fn es_double_zero_row_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bcg_variant(
        dir.path(),
        &format!("data: bcg.csv\n{LOGRR}"),
        |i, rec, h| {
            if i == 2 {
                for col in ["tpos", "cpos"] {
                    rec[h.iter().position(|c| c == col).unwrap()] = "0".into();
                }
            }
        },
    );
    let o = metakit(&["es"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("12 of 13"), "{s}");
    assert!(s.contains("row 2") && s.contains("double-zero"), "{s}");
    let csv = std::fs::read_to_string(dir.path().join("out/effect_sizes.csv")).unwrap();
    assert!(csv.lines().nth(3).unwrap().ends_with("NA,NA,NA"));
}

#[test]
fn missing_column_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bcg_variant(
        dir.path(),
        &format!("data: bcg.csv\n{LOGRR}"),
        |_, rec, h| {
            rec.remove(h.iter().position(|c| c == "cneg").unwrap());
        },
    );
    for cmd in ["es", "fit"] {
        let o = metakit(&[cmd], &cfg, &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("cneg"), "{}", stderr(&o));
    }
}

#[test]
fn threshold_exceeded_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let yaml = format!("data: bcg.csv\n{LOGRR}  failure_threshold: 0.1\n");
    let cfg = bcg_variant(dir.path(), &yaml, |i, rec, h| {
        if i < 3 {
            rec[h.iter().position(|c| c == "tneg").unwrap()] = "-5".into();
        }
    });
    let o = metakit(&["es"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = metakit(&["fit"], &cfg, &dir.path().join("fit"));
    assert_eq!(o.status.code(), Some(3));
    let b = bundle(&dir.path().join("fit"));
    assert_eq!(b["error"]["rows"][0]["exit_code"], 3);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        format!("data: bcg.csv\n{LOGRR}model: {{method: XYZ}}\n"),
        format!("data: bcg.csv\n{LOGRR}bogus: 1\n"),
        format!("data: bcg.csv\n{LOGRR}  columns: {{yi: a, vi: b}}\n"),
        format!("data: bcg.csv\n{LOGRR}outputs: {{tables: [forest]}}\n"),
        format!("data: bcg.csv\n{LOGRR}model: {{terms: [latitude]}}\n"),
        format!("data: bcg.csv\n{LOGRR}deterministic: false\n"),
    ];
    for (n, yaml) in cases.iter().enumerate() {
        let cfg = bcg_variant(dir.path(), yaml, |_, _, _| {});
        let o = metakit(&["fit"], &cfg, &dir.path().join(format!("o{n}")));
        assert_eq!(o.status.code(), Some(2), "case {n}: {}", stderr(&o));
    }
}

#[test]
fn missing_data_file_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.yaml");
    std::fs::write(&cfg, format!("data: nowhere.csv\n{LOGRR}")).unwrap();
    let o = metakit(&["fit"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn analysis_error_exits_5_with_partial_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let yaml = format!("data: bcg.csv\n{LOGRR}clustering: {{column: site}}\n");
    let cfg = bcg_variant(dir.path(), &yaml, |i, rec, _| {
        rec.push(if i == usize::MAX {
            "site".into()
        } else {
            "one".into()
        })
    });
    let out = dir.path().join("out");
    let o = metakit(&["fit"], &cfg, &out);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let b = bundle(&out);
    assert_eq!(b["error"]["rows"][0]["class"], "analysis");
    assert!(b["provenance"]["config_sha256"].is_string());
}

#[test]
fn bcg_random_effects_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let o = metakit(&["fit"], &config("bcg_random_effects.yaml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = bundle(dir.path());
    let est = &table(&b, "meta_analytic_estimates")[0];
    assert_eq!(est["parameter"], "Pooled effect");
    assert!((est["estimate"].as_f64().unwrap() - (-0.714532_f64).exp()).abs() < 1e-4);
    let tests = table(&b, "meta_analytic_tests");
    assert!(tests.iter().all(|r| r["p"].as_f64().unwrap() < 0.05));
    assert!(dir.path().join("plots/forest.svg").exists());
    assert!(dir.path().join("plots/funnel.svg").exists());
    assert_eq!(table(&b, "diagnostics").len(), 13);
    assert_eq!(table(&b, "pubbias").len(), 4);
}

#[test]
fn subgroup_differences_p() {
    let dir = tempfile::tempdir().unwrap();
    let o = metakit(&["fit"], &config("bcg_subgroup.yaml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = bundle(dir.path());
    let row = table(&b, "meta_analytic_tests")
        .iter()
        .find(|r| r["test"] == "Subgroup differences")
        .unwrap();
    assert!((row["p"].as_f64().unwrap() - 0.361).abs() < 0.005);
    assert_eq!(row["df1"], 2);
}

#[test]
fn empty_selection_gives_provenance_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bcg_variant(
        dir.path(),
        &format!("data: bcg.csv\n{LOGRR}outputs: {{tables: []}}\n"),
        |_, _, _| {},
    );
    let out = dir.path().join("out");
    let o = metakit(&["fit"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = bundle(&out);
    assert!(b["tables"].as_object().unwrap().is_empty());
    assert!(b["plots"].as_object().unwrap().is_empty());
    assert!(b.get("error").is_none());
    assert_eq!(b["provenance"]["command"], "fit");
}

#[test]
fn bundles_validate_against_schema() {
    let schema: Value = serde_json::from_str(
        &std::fs::read_to_string(root().join("schema/result_bundle.schema.json")).unwrap(),
    )
    .unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (cmd, name) in [
        ("fit", "bcg_random_effects.yaml"),
        ("fit", "bcg_subgroup.yaml"),
        ("fit", "bcg_meta_regression.yaml"),
        ("plot", "bcg_meta_regression.yaml"),
        ("pubbias", "bcg_random_effects.yaml"),
    ] {
        let out = dir.path().join(format!("{cmd}_{name}"));
        let o = metakit(&[cmd], &config(name), &out);
        assert_eq!(o.status.code(), Some(0), "{cmd} {name}: {}", stderr(&o));
        let b = bundle(&out);
        let errs: Vec<String> = v
            .iter_errors(&b)
            .map(|e| format!("{e} at {}", e.instance_path))
            .collect();
        assert!(errs.is_empty(), "{cmd} {name}: {errs:?}");
    }
    let out = dir.path().join("failed");
    metakit(
        &["fit"],
        &root().join("configs/recidivism_multilevel.yaml"),
        &out,
    );
    let b = bundle(&out);
    assert!(v.is_valid(&b));
}

#[test]
fn shipped_configs_validate_against_config_schema() {
    let schema: Value = serde_json::from_str(
        &std::fs::read_to_string(root().join("schema/run_config.schema.json")).unwrap(),
    )
    .unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let mut n = 0;
    for e in std::fs::read_dir(root().join("configs")).unwrap() {
        let p = e.unwrap().path();
        let doc: Value = serde_yaml::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let errs: Vec<String> = v
            .iter_errors(&doc)
            .map(|e| format!("{e} at {}", e.instance_path))
            .collect();
        assert!(errs.is_empty(), "{}: {errs:?}", p.display());
        n += 1;
    }
    assert!(n >= 5);
    let bad: Value = serde_json::json!({"data": "x.csv", "effect_size": {"columns": {"yi": "y"}}});
    assert!(!v.is_valid(&bad));
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let doc: Value =
        serde_yaml::from_str(&std::fs::read_to_string(config("bcg_subgroup.yaml")).unwrap())
            .unwrap();
    let cfg = bcg_variant(dir.path(), "", |_, _, _| {});
    let mut doc = doc;
    doc["data"] = "bcg.csv".into();
    let json = dir.path().join("c.json");
    std::fs::write(&json, serde_json::to_string(&doc).unwrap()).unwrap();
    drop(cfg);
    let a = metakit(&["fit"], &json, &dir.path().join("a"));
    let b = metakit(
        &["fit"],
        &config("bcg_subgroup.yaml"),
        &dir.path().join("b"),
    );
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0));
    assert_eq!(
        bundle(&dir.path().join("a"))["tables"],
        bundle(&dir.path().join("b"))["tables"]
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let o = metakit(
            &["fit"],
            &config("bcg_meta_regression.yaml"),
            &dir.path().join(run),
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["bundle.json", "plots/bubble.svg"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let b = bundle(&dir.path().join("a"));
    assert_eq!(b["provenance"]["timestamp"], "2023-11-14T22:13:20Z");
}

#[test]
fn r_code_for_reml_knha_is_one_model_call() {
    let dir = tempfile::tempdir().unwrap();
    let o = metakit(
        &["emit-r-code"],
        &config("bcg_random_effects.yaml"),
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    let calls: Vec<&str> = s.lines().filter(|l| l.contains("rma(")).collect();
    assert_eq!(calls.len(), 1, "{s}");
    assert!(
        calls[0].contains("method = \"REML\"") && calls[0].contains("test = \"knha\""),
        "{}",
        calls[0]
    );
    assert!(s.contains("escalc(measure = \"RR\""));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("analysis.R")).unwrap(),
        s
    );
    let again = metakit(
        &["emit-r-code"],
        &config("bcg_random_effects.yaml"),
        dir.path(),
    );
    assert_eq!(stdout(&again), s);
}

#[test]
fn r_code_for_multilevel_has_three_steps_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = metakit(
        &["emit-r-code"],
        &config("recidivism_multilevel.yaml"),
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    let at = |pat: &str| s.find(pat).unwrap_or_else(|| panic!("{pat} missing:\n{s}"));
    let (v, fit, rob) = (at("V <-"), at("rma.mv("), at("robust("));
    assert!(v < fit && fit < rob);
    assert!(s.contains("random = ~ 1 | study/esid"));
    assert!(s.contains("vcov = \"CR2\""));
}
