//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria whose input data is not in `data/` are reported as FAIL with the
//! missing file named. They do not change the exit status; every other
//! failure does.

#[path = "../../core/tests/props/mod.rs"]
mod props;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use metakit_cli::{execute, Command};
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

enum Outcome {
    Pass,
    Fail(String),
    /// Input data is not available; the criterion cannot run.
    Blocked(String),
}

struct Run {
    bundle: Value,
    out: PathBuf,
    elapsed: Duration,
}

struct Ctx {
    tmp: tempfile::TempDir,
    n: usize,
}

impl Ctx {
    fn run(&mut self, cmd: Command, config: &Path) -> Result<Run, String> {
        self.n += 1;
        let out = self.tmp.path().join(format!("run{}", self.n));
        let t = Instant::now();
        let code = execute(cmd, config, &out);
        let elapsed = t.elapsed();
        if code != 0 {
            return Err(format!("{} exited with {code}", config.display()));
        }
        let text = std::fs::read_to_string(out.join("bundle.json")).map_err(|e| e.to_string())?;
        let bundle = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        Ok(Run {
            bundle,
            out,
            elapsed,
        })
    }

    /// Write a config next to the temp outputs with `data` made absolute.
    fn variant(&self, name: &str, base: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
        let mut doc: Value = serde_yaml::from_str(
            &std::fs::read_to_string(root().join("configs").join(base)).unwrap(),
        )
        .unwrap();
        let data = root().join("configs").join(doc["data"].as_str().unwrap());
        doc["data"] = data.to_string_lossy().into_owned().into();
        edit(&mut doc);
        let p = self.tmp.path().join(name);
        std::fs::write(&p, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
        p
    }
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(name)
}

fn missing_data(files: &[&str]) -> Option<String> {
    let absent: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| !root().join("data").join(f).exists())
        .collect();
    (!absent.is_empty()).then(|| {
        format!(
            "input data not present: {}",
            absent
                .iter()
                .map(|f| format!("data/{f}"))
                .collect::<Vec<_>>()
                .join(", ")
        )
    })
}

fn rows<'a>(b: &'a Value, table: &str) -> Result<&'a Vec<Value>, String> {
    b["tables"][table]["rows"]
        .as_array()
        .ok_or_else(|| format!("no {table} table"))
}

fn find<'a>(b: &'a Value, table: &str, key: &str, value: &str) -> Result<&'a Value, String> {
    rows(b, table)?
        .iter()
        .find(|r| r[key] == value)
        .ok_or_else(|| format!("{table}: no row with {key} = {value}"))
}

fn f(v: &Value, key: &str) -> Result<f64, String> {
    v[key]
        .as_f64()
        .ok_or_else(|| format!("{key} is not a number in {v}"))
}

/// Collects failed checks for one criterion.
#[derive(Default)]
struct Checks(Vec<String>);

impl Checks {
    fn near(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        if !((got - want).abs() <= tol) {
            self.0
                .push(format!("{what} = {got:.6}, expected {want} ± {tol}"));
        }
    }

    fn rel(&mut self, what: &str, got: f64, want: f64, rel: f64) {
        if !((got - want).abs() <= rel * want.abs()) {
            self.0.push(format!(
                "{what} = {got:.10}, expected {want:.10} (rel {rel:e})"
            ));
        }
    }

    fn holds(&mut self, what: &str, ok: bool) {
        if !ok {
            self.0.push(what.to_string());
        }
    }

    fn within(&mut self, what: &str, d: Duration, limit: Duration) {
        if d > limit {
            self.0.push(format!("{what} took {d:.2?}, limit {limit:?}"));
        }
    }

    fn outcome(self) -> Outcome {
        if self.0.is_empty() {
            Outcome::Pass
        } else {
            Outcome::Fail(self.0.join("; "))
        }
    }
}

fn criterion1(cx: &mut Ctx) -> Result<Outcome, String> {
    if let Some(m) = missing_data(&["assink2016.csv"]) {
        return Ok(Outcome::Blocked(m));
    }
    let r = cx.run(Command::Fit, &config("recidivism_multilevel.yaml"))?;
    let e = find(
        &r.bundle,
        "meta_analytic_estimates",
        "parameter",
        "Pooled effect",
    )?;
    let mut c = Checks::default();
    c.near("estimate", f(e, "estimate")?, 0.36, 0.005);
    c.near("CI lower", f(e, "ci_lb")?, 0.16, 0.01);
    c.near("CI upper", f(e, "ci_ub")?, 0.56, 0.01);
    c.near("df", f(e, "df")?, 3.9, 0.1);
    c.near("p", f(e, "p")?, 0.002, 0.0005);
    c.within("fit", r.elapsed, Duration::from_secs(5));
    Ok(c.outcome())
}

fn criterion2(cx: &mut Ctx) -> Result<Outcome, String> {
    let r = cx.run(Command::Fit, &config("bcg_subgroup.yaml"))?;
    let row = find(
        &r.bundle,
        "meta_analytic_tests",
        "test",
        "Subgroup differences",
    )?;
    let mut c = Checks::default();
    c.near("subgroup differences p", f(row, "p")?, 0.361, 0.005);
    c.within("fit", r.elapsed, Duration::from_secs(2));
    Ok(c.outcome())
}

fn omitted(b: &Value) -> usize {
    b["notes"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|n| {
            n.as_str()?
                .strip_suffix(" rows omitted for missing values")?
                .parse()
                .ok()
        })
        .next()
        .unwrap_or(0)
}

fn criterion3(cx: &mut Ctx) -> Result<Outcome, String> {
    if let Some(m) = missing_data(&["bangertdrowns2004.csv"]) {
        return Ok(Outcome::Blocked(m));
    }
    let r = cx.run(Command::Fit, &config("writing_to_learn.yaml"))?;
    let mut c = Checks::default();
    let n = omitted(&r.bundle);
    c.holds(&format!("{n} rows omitted, expected exactly 3"), n == 3);
    Ok(c.outcome())
}

fn criterion4(cx: &mut Ctx) -> Result<Outcome, String> {
    let mut c = Checks::default();
    let r = cx.run(Command::Fit, &config("bcg_random_effects.yaml"))?;
    for t in ["Pooled effect", "Heterogeneity"] {
        let p = f(find(&r.bundle, "meta_analytic_tests", "test", t)?, "p")?;
        c.holds(
            &format!("example 1: {t} test does not reject (p = {p:.4})"),
            p < 0.05,
        );
    }

    let mut blocked = Vec::new();
    match missing_data(&["bangertdrowns2004.csv"]) {
        Some(m) => blocked.push(m),
        None => {
            let b = cx
                .run(Command::Fit, &config("writing_to_learn.yaml"))?
                .bundle;
            for term in ["length", "feedback"] {
                let row = rows(&b, "meta_regression_terms")?
                    .iter()
                    .find(|r| r["term"] == term && r["component"] == "location")
                    .ok_or(format!("no location term test for {term}"))?;
                let p = f(row, "p")?;
                c.holds(
                    &format!("example 2: {term} term test rejects (p = {p:.4})"),
                    p >= 0.05,
                );
            }
            let emms: Vec<&Value> = rows(&b, "emm")?
                .iter()
                .filter(|r| r["term"] == "feedback")
                .collect();
            c.holds("example 2: expected two feedback EMMs", emms.len() == 2);
            for e in emms {
                let p = f(e, "p")?;
                c.holds(
                    &format!(
                        "example 2: feedback EMM {} not significant (p = {p:.4})",
                        e["level"]
                    ),
                    p < 0.05,
                );
            }
            let slope = rows(&b, "meta_regression_coefficients")?
                .iter()
                .find(|r| r["component"] == "scale" && r["coefficient"] == "length")
                .ok_or("no scale coefficient for length")?;
            let p = f(slope, "p")?;
            c.holds(
                &format!("example 2: scale slope on length significant (p = {p:.4})"),
                p >= 0.05,
            );
        }
    }
    match missing_data(&["assink2016.csv"]) {
        Some(m) => blocked.push(m),
        None => {
            let b = cx
                .run(Command::Fit, &config("recidivism_multilevel.yaml"))?
                .bundle;
            let tests = rows(&b, "component_inclusion_tests")?;
            c.holds("example 3: no inclusion tests", !tests.is_empty());
            for t in tests {
                let p = f(t, "p")?;
                c.holds(
                    &format!(
                        "example 3: inclusion test {} does not reject (p = {p:.4})",
                        t["component"]
                    ),
                    p < 0.05,
                );
            }
        }
    }
    Ok(match (c.outcome(), blocked.is_empty()) {
        (Outcome::Pass, false) => {
            Outcome::Blocked(format!("example 1 checks pass; {}", blocked.join("; ")))
        }
        (Outcome::Fail(m), false) => Outcome::Fail(format!("{m}; {}", blocked.join("; "))),
        (o, true) => o,
        (o, _) => o,
    })
}

fn oracle() -> Value {
    let p = root().join("crates/core/tests/fixtures/bcg_oracle.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn criterion5(cx: &mut Ctx) -> Result<Outcome, String> {
    const EST: f64 = 1e-4;
    const PROFILE: f64 = 1e-3;
    let o = oracle();
    let t = Instant::now();
    let mut c = Checks::default();

    let b = cx
        .run(Command::Fit, &config("bcg_random_effects.yaml"))?
        .bundle;
    let tau2 = find(&b, "meta_analytic_estimates", "parameter", "tau2")?;
    c.rel(
        "REML tau2",
        f(tau2, "estimate")?,
        o["tau2"]["REML"].as_f64().unwrap(),
        EST,
    );
    c.rel(
        "Q-profile CI lower",
        f(tau2, "ci_lb")?,
        o["tau2_ci_qprofile"][0].as_f64().unwrap(),
        PROFILE,
    );
    c.rel(
        "Q-profile CI upper",
        f(tau2, "ci_ub")?,
        o["tau2_ci_qprofile"][1].as_f64().unwrap(),
        PROFILE,
    );
    let pooled = find(&b, "meta_analytic_estimates", "parameter", "Pooled effect")?;
    c.rel(
        "pooled log RR",
        f(pooled, "estimate")?.ln(),
        o["reml"]["b"].as_f64().unwrap(),
        EST,
    );
    let i2 = find(&b, "meta_analytic_estimates", "parameter", "I2")?;
    c.rel(
        "I2",
        f(i2, "estimate")?,
        o["reml"]["I2"].as_f64().unwrap(),
        EST,
    );

    let mh = find(
        &b,
        "meta_analytic_estimates",
        "parameter",
        "Mantel-Haenszel (log RR)",
    )?;
    c.rel(
        "MH log RR",
        f(mh, "estimate")?.ln(),
        o["mh"]["rr"].as_f64().unwrap(),
        EST,
    );
    c.rel(
        "MH se",
        f(mh, "se")?,
        o["mh"]["rr_se"].as_f64().unwrap(),
        EST,
    );
    let peto = find(&b, "meta_analytic_estimates", "parameter", "Peto (log OR)")?;
    c.rel(
        "Peto log OR",
        f(peto, "estimate")?.ln(),
        o["mh"]["peto"].as_f64().unwrap(),
        EST,
    );
    c.rel(
        "Peto se",
        f(peto, "se")?,
        o["mh"]["peto_se"].as_f64().unwrap(),
        EST,
    );

    let egger = find(&b, "pubbias", "test", "Egger regression")?;
    c.rel(
        "Egger t",
        f(egger, "stat")?,
        o["egger"]["t"].as_f64().unwrap(),
        EST,
    );
    c.rel(
        "Egger p",
        f(egger, "p")?,
        o["egger"]["p"].as_f64().unwrap(),
        EST,
    );
    let begg = find(&b, "pubbias", "test", "Rank correlation")?;
    c.rel(
        "Begg tau",
        f(begg, "estimate")?,
        o["begg"]["tau"].as_f64().unwrap(),
        EST,
    );
    c.rel(
        "Begg p",
        f(begg, "p")?,
        o["begg"]["p"].as_f64().unwrap(),
        EST,
    );
    let tf = find(&b, "pubbias", "test", "Trim and fill")?;
    c.holds(
        "trim-and-fill k0",
        tf["k"].as_i64() == o["trimfill"]["L0"]["k0"].as_i64(),
    );
    c.rel(
        "trim-and-fill estimate",
        f(tf, "estimate")?.ln(),
        o["trimfill"]["L0"]["adjusted_b"].as_f64().unwrap(),
        EST,
    );
    let fsn = find(&b, "pubbias", "test", "Fail-safe N")?;
    c.holds(
        "fail-safe N",
        fsn["k"].as_i64() == o["failsafe"]["rosenthal"].as_i64(),
    );

    for m in ["DL", "PM"] {
        let cfg = cx.variant(&format!("bcg_{m}.json"), "bcg_random_effects.yaml", |d| {
            d["model"]["method"] = m.into();
            d["outputs"] = serde_json::json!({"tables": ["meta_analytic_estimates"]});
        });
        let b = cx.run(Command::Fit, &cfg)?.bundle;
        let tau2 = find(&b, "meta_analytic_estimates", "parameter", "tau2")?;
        c.rel(
            &format!("{m} tau2"),
            f(tau2, "estimate")?,
            o["tau2"][m].as_f64().unwrap(),
            EST,
        );
    }
    c.within("suite", t.elapsed(), Duration::from_secs(60));

    let mut blocked = Vec::new();
    if let Some(m) = missing_data(&["assink2016.csv"]) {
        blocked.push(format!(
            "recidivism variance components and profile CIs: {m}"
        ));
    }
    if let Some(m) = missing_data(&["bangertdrowns2004.csv"]) {
        blocked.push(format!("writing-to-learn EMMs and contrasts: {m}"));
    }
    // With the data present there are still no frozen reference values for
    // these two items, so they cannot pass.
    Ok(match c.outcome() {
        Outcome::Pass if blocked.is_empty() => Outcome::Fail(
            "no reference values for the recidivism and writing-to-learn items".into(),
        ),
        Outcome::Pass => Outcome::Blocked(format!("BCG items pass; {}", blocked.join("; "))),
        Outcome::Fail(m) => Outcome::Fail(m),
        o => o,
    })
}

fn criterion6() -> Result<Outcome, String> {
    let t = Instant::now();
    let mut c = Checks::default();
    for (name, check) in props::ALL {
        if let Err(e) = check(props::CASES.max(200)) {
            c.0.push(format!("{name}: {e}"));
        }
    }
    c.within("property suites", t.elapsed(), Duration::from_secs(120));
    Ok(c.outcome())
}

fn golden(c: &mut Checks, name: &str, svg: &[u8]) {
    let path = golden_dir().join(name);
    if std::env::var_os("METAKIT_BLESS").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, svg).unwrap();
    }
    match std::fs::read(&path) {
        Ok(want) => c.holds(&format!("{name} differs from its golden file"), want == svg),
        Err(_) => c.0.push(format!("missing golden file {}", path.display())),
    }
}

fn criterion7(cx: &mut Ctx) -> Result<Outcome, String> {
    let mut c = Checks::default();
    let mut check = |cx: &mut Ctx, cfg: &str, plots: &[(&str, &str)]| -> Result<(), String> {
        let a = cx.run(Command::Plot, &config(cfg))?;
        let b = cx.run(Command::Plot, &config(cfg))?;
        for (plot, gold) in plots {
            let rel = a.bundle["plots"][*plot]
                .as_str()
                .ok_or(format!("{cfg}: no {plot} plot"))?;
            let x = std::fs::read(a.out.join(rel)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.out.join(rel)).map_err(|e| e.to_string())?;
            c.holds(&format!("{gold} changes between runs"), x == y);
            golden(&mut c, gold, &x);
        }
        Ok(())
    };
    check(
        cx,
        "bcg_random_effects.yaml",
        &[("funnel", "bcg_funnel.svg"), ("forest", "bcg_forest.svg")],
    )?;
    check(
        cx,
        "bcg_meta_regression.yaml",
        &[("bubble", "bcg_bubble.svg")],
    )?;
    let mut blocked = Vec::new();
    match missing_data(&["bangertdrowns2004.csv"]) {
        Some(m) => blocked.push(m),
        None => check(
            cx,
            "writing_to_learn.yaml",
            &[("bubble", "writing_to_learn_bubble.svg")],
        )?,
    }
    match missing_data(&["assink2016.csv"]) {
        Some(m) => blocked.push(m),
        None => check(
            cx,
            "recidivism_multilevel.yaml",
            &[
                ("funnel", "recidivism_funnel.svg"),
                ("forest", "recidivism_forest.svg"),
            ],
        )?,
    }
    Ok(match c.outcome() {
        Outcome::Pass if !blocked.is_empty() => {
            Outcome::Blocked(format!("example 1 plots stable; {}", blocked.join("; ")))
        }
        o => o,
    })
}

fn main() {
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
    let mut cx = Ctx {
        tmp: tempfile::tempdir().unwrap(),
        n: 0,
    };
    let criteria: Vec<(&str, Result<Outcome, String>)> = vec![
        ("1 example 3 headline estimate", criterion1(&mut cx)),
        ("2 example 1 subgroup differences", criterion2(&mut cx)),
        ("3 example 2 omitted rows", criterion3(&mut cx)),
        ("4 qualitative test decisions", criterion4(&mut cx)),
        ("5 oracle equivalence", criterion5(&mut cx)),
        ("6 property suites", criterion6()),
        ("7 golden plots", criterion7(&mut cx)),
    ];
    let (mut pass, mut fail, mut blocked) = (0, 0, 0);
    for (name, r) in criteria {
        match r.unwrap_or_else(Outcome::Fail) {
            Outcome::Pass => {
                pass += 1;
                println!("criterion {name}: PASS");
            }
            Outcome::Fail(m) => {
                fail += 1;
                println!("criterion {name}: FAIL ({m})");
            }
            Outcome::Blocked(m) => {
                blocked += 1;
                println!("criterion {name}: FAIL ({m})");
            }
        }
    }
    println!(
        "acceptance: {pass} passed, {} failed ({blocked} for missing input data)",
        fail + blocked
    );
    if fail > 0 {
        std::process::exit(1);
    }
}
