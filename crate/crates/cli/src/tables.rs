//! Result tables of the bundle catalog.

use metakit::dist::{f_sf, Reference};
use metakit::kernel::VarKind;
use metakit::mv::{InclusionTest, MvFit, SigmaInterval};
use metakit::postfit::{
    contrasts, emm, emm_continuous, emm_scale, CaseDiagnostics, ContrastRow, EmmRow, LinearFit,
};
use metakit::pubbias::{BeggResult, EggerResult, FailSafe, TrimFillResult};
use metakit::robust::{robust_coef_tests, RobustFit, RobustLinearFit};
use metakit::table::{Cell, ColumnKind, ResultTable};
use metakit::uni::mh::PooledEstimate;
use metakit::uni::subgroup::SubgroupResult;
use metakit::uni::{
    ci_tau2_qprofile, prediction_interval, Coef, Estimate, Prediction, Transform, UniFit, WaldTest,
};
use metakit::Result;
use nalgebra::{DMatrix, DVector};

use crate::config::EmmConfig;

fn tests_table() -> ResultTable {
    ResultTable::new("meta_analytic_tests", "Meta-Analytic Tests")
        .column("test", "", ColumnKind::Text)
        .column("subgroup", "Subgroup", ColumnKind::Text)
        .column("statistic", "Statistic", ColumnKind::Text)
        .column("stat", "Value", ColumnKind::Number)
        .column("df1", "df", ColumnKind::Number)
        .column("df2", "df2", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
}

fn estimates_table() -> ResultTable {
    ResultTable::new("meta_analytic_estimates", "Meta-Analytic Estimates")
        .column("parameter", "", ColumnKind::Text)
        .column("subgroup", "Subgroup", ColumnKind::Text)
        .column("estimate", "Estimate", ColumnKind::Number)
        .column("se", "SE", ColumnKind::Number)
        .column("stat", "Statistic", ColumnKind::Number)
        .column("df", "df", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
        .column("ci_lb", "Lower CI", ColumnKind::Number)
        .column("ci_ub", "Upper CI", ColumnKind::Number)
        .column("pi_lb", "Lower PI", ColumnKind::Number)
        .column("pi_ub", "Upper PI", ColumnKind::Number)
}

fn text(s: Option<&str>) -> Cell {
    s.map_or(Cell::Null, Cell::from)
}

fn stat_name(r: Reference) -> &'static str {
    if r.df().is_some() {
        "t"
    } else {
        "z"
    }
}

fn wald_row(t: &mut ResultTable, test: &str, group: Option<&str>, w: &WaldTest) {
    let label = if w.df2.is_some() { "F" } else { "Q_M" };
    t.push_row(vec![
        test.into(),
        text(group),
        label.into(),
        w.stat.into(),
        w.df1.into(),
        Cell::from(w.df2),
        w.p.into(),
    ]);
}

/// Naive F test of `cols` with the robust covariance and G − 1 denominator df.
pub fn robust_wald(rf: &RobustFit, cols: &[usize]) -> Option<WaldTest> {
    if cols.is_empty() {
        return None;
    }
    let q = cols.len();
    let b = DVector::from_iterator(q, cols.iter().map(|&j| rf.b[j]));
    let v = DMatrix::from_fn(q, q, |i, j| rf.cov_robust[(cols[i], cols[j])]);
    let vinv = v.try_inverse()?;
    let stat = (b.transpose() * vinv * &b)[(0, 0)] / q as f64;
    let df2 = (rf.n_clusters - 1) as f64;
    Some(WaldTest {
        stat,
        df1: q as f64,
        df2: Some(df2),
        p: f_sf(stat, q as f64, df2),
    })
}

fn moderator_cols(design: &metakit::kernel::DesignMatrix) -> Vec<usize> {
    let skip = usize::from(design.encoder.intercept);
    (skip..design.x.ncols()).collect()
}

fn transformed(t: Transform, e: f64, lb: f64, ub: f64) -> (f64, f64, f64) {
    (t.apply(e), t.apply(lb), t.apply(ub))
}

fn estimate_row(
    tab: &mut ResultTable,
    param: &str,
    group: Option<&str>,
    e: &Estimate,
    df: Option<f64>,
    pi: Option<(f64, f64)>,
    tr: Transform,
) {
    let (est, lb, ub) = transformed(tr, e.estimate, e.ci_lb, e.ci_ub);
    let pi = pi.map(|(a, b)| (tr.apply(a), tr.apply(b)));
    tab.push_row(vec![
        param.into(),
        text(group),
        est.into(),
        e.se.into(),
        e.stat.into(),
        Cell::from(df),
        e.p.into(),
        lb.into(),
        ub.into(),
        Cell::from(pi.map(|p| p.0)),
        Cell::from(pi.map(|p| p.1)),
    ]);
}

fn plain_row(
    tab: &mut ResultTable,
    param: &str,
    group: Option<&str>,
    est: f64,
    se: Option<f64>,
    ci: Option<(f64, f64)>,
) {
    tab.push_row(vec![
        param.into(),
        text(group),
        est.into(),
        Cell::from(se),
        Cell::Null,
        Cell::Null,
        Cell::Null,
        Cell::from(ci.map(|c| c.0)),
        Cell::from(ci.map(|c| c.1)),
        Cell::Null,
        Cell::Null,
    ]);
}

/// Effect at the column means of X: the pooled effect for intercept-only models.
fn centre(design: &metakit::kernel::DesignMatrix) -> DVector<f64> {
    let x = &design.x;
    DVector::from_iterator(x.ncols(), (0..x.ncols()).map(|j| x.column(j).mean()))
}

fn pooled_label(p: usize) -> &'static str {
    if p == 1 {
        "Pooled effect"
    } else {
        "Adjusted estimate"
    }
}

/// Estimate, its df and the prediction interval; robust when `rf` is present.
fn pooled(
    fit: &dyn LinearFit,
    rf: Option<&RobustFit>,
    total_tau2: f64,
    level: f64,
) -> (Estimate, Option<f64>, (f64, f64)) {
    let c = centre(fit.design());
    let (e, reference) = match rf {
        Some(r) => (r.estimate(&c, 0.0), Reference::T(r.df_for(&c))),
        None => (fit.estimate(&c, 0.0), fit.reference_for(&c)),
    };
    let q = reference.critical(level);
    let pse = (e.se * e.se + total_tau2).sqrt();
    (
        e,
        reference.df(),
        (e.estimate - q * pse, e.estimate + q * pse),
    )
}

pub struct UniTables<'a> {
    pub fit: &'a UniFit,
    pub robust: Option<&'a RobustFit>,
    pub subgroup: Option<&'a SubgroupResult>,
    pub mh: Vec<(String, PooledEstimate)>,
}

impl UniTables<'_> {
    pub fn tests(&self) -> ResultTable {
        let f = self.fit;
        let mut t = tests_table();
        let pooled_test = |t: &mut ResultTable, f: &UniFit, group: Option<&str>| {
            if f.p == 1 && f.design.encoder.intercept {
                let c = DVector::from_element(1, 1.0);
                let (e, r) = match self.robust.filter(|_| group.is_none()) {
                    Some(rf) => (rf.estimate(&c, 0.0), Reference::T(rf.df_for(&c))),
                    None => (f.linear_combination(&c, 0.0), f.reference),
                };
                t.push_row(vec![
                    "Pooled effect".into(),
                    text(group),
                    stat_name(r).into(),
                    e.stat.into(),
                    Cell::from(r.df()),
                    Cell::Null,
                    e.p.into(),
                ]);
            } else {
                let w = match self.robust.filter(|_| group.is_none()) {
                    Some(rf) => robust_wald(rf, &moderator_cols(&f.design)),
                    None => f.qm,
                };
                if let Some(w) = w {
                    wald_row(t, "Moderation", group, &w);
                }
            }
            let het = if f.p == 1 {
                "Heterogeneity"
            } else {
                "Residual heterogeneity"
            };
            t.push_row(vec![
                het.into(),
                text(group),
                "Q".into(),
                f.qe.into(),
                f.qe_df.into(),
                Cell::Null,
                f.qe_p.into(),
            ]);
        };
        pooled_test(&mut t, f, None);
        if let Some(w) = f.scale.as_ref().and_then(|s| s.omnibus()) {
            wald_row(&mut t, "Scale moderation", None, &w);
        }
        if let Some(sg) = self.subgroup {
            for g in &sg.groups {
                if let Some(gf) = &g.fit {
                    pooled_test(&mut t, gf, Some(&g.level));
                }
            }
            if let Some(b) = &sg.between {
                t.push_row(vec![
                    "Subgroup differences".into(),
                    Cell::Null,
                    "Q".into(),
                    b.q.into(),
                    b.df.into(),
                    Cell::Null,
                    b.p.into(),
                ]);
            }
            for w in &sg.warnings {
                t.footnote(w.clone());
            }
        }
        if let Some(rf) = self.robust {
            t.footnote(robust_note(rf));
        }
        t
    }

    pub fn estimates(&self) -> Result<ResultTable> {
        let f = self.fit;
        let tr = f.spec.transform;
        let level = f.spec.ci_level;
        let mut t = estimates_table();
        let tau2_total = f.tau2_rows().mean();
        let (e, df, pi) = pooled(f, self.robust, tau2_total, level);
        estimate_row(&mut t, pooled_label(f.p), None, &e, df, Some(pi), tr);
        if f.scale.is_none() {
            het_rows(&mut t, f, None)?;
        }
        if let Some(sg) = self.subgroup {
            for g in &sg.groups {
                if let Some(gf) = &g.fit {
                    let pr = prediction_interval(gf, level);
                    let c = DVector::from_element(1, 1.0);
                    let e = gf.linear_combination(&c, 0.0);
                    estimate_row(
                        &mut t,
                        "Pooled effect",
                        Some(&g.level),
                        &e,
                        gf.reference.df(),
                        Some((pr.pi_lb, pr.pi_ub)),
                        tr,
                    );
                    het_rows(&mut t, gf, Some(&g.level))?;
                } else if let Some(n) = &g.note {
                    t.footnote(format!("{}: {n}", g.level));
                }
            }
        }
        for (label, m) in &self.mh {
            let e = Estimate {
                estimate: m.estimate,
                se: m.se,
                stat: m.z,
                p: m.p,
                ci_lb: m.ci_lb,
                ci_ub: m.ci_ub,
            };
            estimate_row(&mut t, label, None, &e, None, None, tr);
        }
        if tr != Transform::None {
            t.footnote(format!("Estimates and intervals are back-transformed with {tr:?}; SE and statistics stay on the analysis scale."));
        }
        if let Some(rf) = self.robust {
            t.footnote(robust_note(rf));
        }
        Ok(t)
    }

    pub fn terms(&self) -> Option<ResultTable> {
        let f = self.fit;
        let has_terms = !f.design.encoder.terms.is_empty()
            || f.scale
                .as_ref()
                .is_some_and(|s| !s.design.encoder.terms.is_empty());
        if !has_terms {
            return None;
        }
        let mut t = terms_table();
        for term in &f.design.encoder.terms {
            let name = term.name();
            let w = match self.robust {
                Some(rf) => f
                    .design
                    .encoder
                    .term_range(&name)
                    .and_then(|r| robust_wald(rf, &r.collect::<Vec<_>>())),
                None => f.term_test(&name).ok(),
            };
            if let Some(w) = w {
                term_row(&mut t, &name, "location", &w);
            }
        }
        if let Some(s) = &f.scale {
            for term in &s.design.encoder.terms {
                if let Ok(w) = s.term_test(&term.name()) {
                    term_row(&mut t, &term.name(), "scale", &w);
                }
            }
        }
        if let Some(rf) = self.robust {
            t.footnote(format!(
                "{} Term tests use a naive F with G - 1 denominator df.",
                robust_note(rf)
            ));
        }
        Some(t)
    }

    pub fn coefficients(&self) -> Option<ResultTable> {
        let f = self.fit;
        if f.p == 1 && f.scale.is_none() {
            return None;
        }
        let mut t = coef_table();
        let loc = match self.robust {
            Some(rf) => robust_coef_tests(rf, None),
            None => f.coefs(),
        };
        coef_rows(&mut t, "location", &loc);
        if let Some(s) = &f.scale {
            coef_rows(&mut t, "scale", &s.coefs());
        }
        if let Some(rf) = self.robust {
            t.footnote(robust_note(rf));
        }
        Some(t)
    }
}

fn het_rows(t: &mut ResultTable, f: &UniFit, group: Option<&str>) -> Result<()> {
    let ci = ci_tau2_qprofile(&f.y, &f.v, &f.design.x, f.spec.ci_level).ok();
    let tau2_ci = ci.as_ref().map(|c| (c.lb, c.ub));
    let vt = f.vt;
    plain_row(
        t,
        "tau",
        group,
        f.tau2.sqrt(),
        None,
        tau2_ci.map(|(a, b)| (a.sqrt(), b.sqrt())),
    );
    plain_row(t, "tau2", group, f.tau2, f.se_tau2, tau2_ci);
    plain_row(
        t,
        "I2",
        group,
        f.i2,
        None,
        tau2_ci.map(|(a, b)| (100.0 * a / (a + vt), 100.0 * b / (b + vt))),
    );
    plain_row(
        t,
        "H2",
        group,
        f.h2,
        None,
        tau2_ci.map(|(a, b)| ((a + vt) / vt, (b + vt) / vt)),
    );
    if let Some(flag) = &f.tau2_flag {
        t.footnote(flag.clone());
    }
    Ok(())
}

fn terms_table() -> ResultTable {
    ResultTable::new("meta_regression_terms", "Meta-Regression Terms Tests")
        .column("term", "", ColumnKind::Text)
        .column("component", "Component", ColumnKind::Text)
        .column("statistic", "Statistic", ColumnKind::Text)
        .column("stat", "Value", ColumnKind::Number)
        .column("df1", "df1", ColumnKind::Number)
        .column("df2", "df2", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
}

fn term_row(t: &mut ResultTable, term: &str, component: &str, w: &WaldTest) {
    let label = if w.df2.is_some() { "F" } else { "Q_M" };
    t.push_row(vec![
        term.into(),
        component.into(),
        label.into(),
        w.stat.into(),
        w.df1.into(),
        Cell::from(w.df2),
        w.p.into(),
    ]);
}

fn coef_table() -> ResultTable {
    ResultTable::new(
        "meta_regression_coefficients",
        "Meta-Regression Coefficients",
    )
    .column("component", "Component", ColumnKind::Text)
    .column("coefficient", "", ColumnKind::Text)
    .column("estimate", "Estimate", ColumnKind::Number)
    .column("se", "SE", ColumnKind::Number)
    .column("stat", "Statistic", ColumnKind::Number)
    .column("df", "df", ColumnKind::Number)
    .column("p", "p", ColumnKind::Pvalue)
    .column("ci_lb", "Lower CI", ColumnKind::Number)
    .column("ci_ub", "Upper CI", ColumnKind::Number)
}

fn coef_rows(t: &mut ResultTable, component: &str, coefs: &[Coef]) {
    for c in coefs {
        t.push_row(vec![
            component.into(),
            c.name.as_str().into(),
            c.estimate.into(),
            c.se.into(),
            c.stat.into(),
            Cell::from(c.df),
            c.p.into(),
            c.ci_lb.into(),
            c.ci_ub.into(),
        ]);
    }
}

fn robust_note(rf: &RobustFit) -> String {
    format!(
        "{:?} cluster-robust inference over {} clusters with Satterthwaite degrees of freedom.",
        rf.kind, rf.n_clusters
    )
}

pub struct MvTables<'a> {
    pub fit: &'a MvFit,
    pub robust: Option<&'a RobustFit>,
}

impl MvTables<'_> {
    pub fn tests(&self) -> ResultTable {
        let f = self.fit;
        let mut t = tests_table();
        if f.p == 1 && f.design.encoder.intercept {
            let c = DVector::from_element(1, 1.0);
            let (e, r) = match self.robust {
                Some(rf) => (rf.estimate(&c, 0.0), Reference::T(rf.df_for(&c))),
                None => (f.linear_combination(&c, 0.0), f.reference),
            };
            t.push_row(vec![
                "Pooled effect".into(),
                Cell::Null,
                stat_name(r).into(),
                e.stat.into(),
                Cell::from(r.df()),
                Cell::Null,
                e.p.into(),
            ]);
        } else {
            let w = match self.robust {
                Some(rf) => robust_wald(rf, &moderator_cols(&f.design)),
                None => f.qm,
            };
            if let Some(w) = w {
                wald_row(&mut t, "Moderation", None, &w);
            }
        }
        let het = if f.p == 1 {
            "Heterogeneity"
        } else {
            "Residual heterogeneity"
        };
        t.push_row(vec![
            het.into(),
            Cell::Null,
            "Q".into(),
            f.qe.into(),
            f.qe_df.into(),
            Cell::Null,
            f.qe_p.into(),
        ]);
        if let Some(rf) = self.robust {
            t.footnote(robust_note(rf));
        }
        t
    }

    pub fn estimates(&self, transform: Transform) -> ResultTable {
        let f = self.fit;
        let mut t = estimates_table();
        let (e, df, pi) = pooled(f, self.robust, f.total_sigma2(), f.spec.ci_level);
        estimate_row(&mut t, pooled_label(f.p), None, &e, df, Some(pi), transform);
        if let Some(rf) = self.robust {
            t.footnote(robust_note(rf));
        }
        t
    }

    pub fn terms(&self) -> Option<ResultTable> {
        let f = self.fit;
        if f.design.encoder.terms.is_empty() {
            return None;
        }
        let mut t = terms_table();
        for term in &f.design.encoder.terms {
            let name = term.name();
            let w = match self.robust {
                Some(rf) => f
                    .design
                    .encoder
                    .term_range(&name)
                    .and_then(|r| robust_wald(rf, &r.collect::<Vec<_>>())),
                None => f.term_test(&name).ok(),
            };
            if let Some(w) = w {
                term_row(&mut t, &name, "location", &w);
            }
        }
        Some(t)
    }

    pub fn coefficients(&self) -> Option<ResultTable> {
        let f = self.fit;
        if f.p == 1 {
            return None;
        }
        let mut t = coef_table();
        let c = match self.robust {
            Some(rf) => robust_coef_tests(rf, None),
            None => f.coefs(),
        };
        coef_rows(&mut t, "location", &c);
        Some(t)
    }

    pub fn random_effects(&self, intervals: &[Option<SigmaInterval>]) -> ResultTable {
        let f = self.fit;
        let mut t = ResultTable::new("random_effects_summary", "Random Effects")
            .column("component", "", ColumnKind::Text)
            .column("levels", "Levels", ColumnKind::Integer)
            .column("sigma2", "σ²", ColumnKind::Number)
            .column("sigma", "σ", ColumnKind::Number)
            .column("ci_lb", "Lower CI (σ²)", ColumnKind::Number)
            .column("ci_ub", "Upper CI (σ²)", ColumnKind::Number)
            .column("open_upper", "Open upper", ColumnKind::Boolean)
            .column("boundary", "At zero", ColumnKind::Boolean);
        for (i, c) in f.components.iter().enumerate() {
            let ci = intervals.get(i).and_then(|x| x.as_ref());
            t.push_row(vec![
                c.name.as_str().into(),
                c.n_levels.into(),
                f.sigma2[i].into(),
                f.sigma2[i].sqrt().into(),
                Cell::from(ci.map(|x| x.lb)),
                Cell::from(ci.map(|x| x.ub)),
                ci.map_or(Cell::Null, |x| x.open_upper.into()),
                f.boundary[i].into(),
            ]);
        }
        if let Some(ci) = intervals.iter().flatten().next() {
            t.footnote(format!(
                "Profile-likelihood intervals at level {}.",
                ci.level
            ));
        }
        t
    }
}

pub fn inclusion(tests: &[InclusionTest]) -> ResultTable {
    let mut t = metakit::mv::inclusion_table(tests);
    t.name = "component_inclusion_tests".into();
    t.title = "Component Inclusion Tests".into();
    t
}

fn emm_table() -> ResultTable {
    ResultTable::new("emm", "Estimated Marginal Means")
        .column("component", "Component", ColumnKind::Text)
        .column("term", "Term", ColumnKind::Text)
        .column("level", "Level", ColumnKind::Text)
        .column("value", "Value", ColumnKind::Number)
        .column("estimate", "Estimate", ColumnKind::Number)
        .column("se", "SE", ColumnKind::Number)
        .column("stat", "Statistic", ColumnKind::Number)
        .column("df", "df", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
        .column("ci_lb", "Lower CI", ColumnKind::Number)
        .column("ci_ub", "Upper CI", ColumnKind::Number)
}

fn emm_rows(t: &mut ResultTable, component: &str, term: &str, rows: &[EmmRow], tr: Transform) {
    for r in rows {
        let (e, lb, ub) = transformed(tr, r.estimate, r.ci_lb, r.ci_ub);
        t.push_row(vec![
            component.into(),
            term.into(),
            r.level.as_str().into(),
            Cell::from(r.value),
            e.into(),
            r.se.into(),
            r.stat.into(),
            Cell::from(r.df),
            r.p.into(),
            lb.into(),
            ub.into(),
        ]);
    }
}

fn is_continuous(fit: &dyn LinearFit, term: &str) -> bool {
    matches!(
        fit.design().encoder.vars.get(term),
        Some(VarKind::Continuous)
    )
}

/// Location EMMs (robust when `rf` is given) plus optional scale EMMs.
pub fn emm_tables(
    fit: &dyn LinearFit,
    rf: Option<&RobustFit>,
    scale: Option<&metakit::uni::ScaleFit>,
    cfg: &EmmConfig,
    tr: Transform,
) -> Result<(ResultTable, Option<ResultTable>)> {
    let wrapped;
    let lf: &dyn LinearFit = match rf {
        Some(r) => {
            wrapped = RobustLinearFit { fit, robust: r };
            &wrapped
        }
        None => fit,
    };
    let mut t = emm_table();
    let mut ct: Option<ResultTable> = None;
    if cfg.terms.is_empty() {
        emm_rows(
            &mut t,
            "location",
            "overall",
            &emm(lf, None, cfg.weighting, cfg.test_against)?,
            tr,
        );
    }
    for term in &cfg.terms {
        let rows = if is_continuous(lf, term) {
            emm_continuous(lf, term, cfg.weighting, cfg.test_against)?
        } else {
            emm(lf, Some(term), cfg.weighting, cfg.test_against)?
        };
        emm_rows(&mut t, "location", term, &rows, tr);
        if cfg.contrasts && !is_continuous(lf, term) {
            let c = contrasts(lf, term, cfg.weighting, cfg.adjustment)?;
            contrast_rows(ct.get_or_insert_with(contrast_table), term, &c);
        }
    }
    if let (true, Some(s)) = (cfg.scale, scale) {
        if cfg.terms.is_empty() {
            emm_rows(
                &mut t,
                "scale",
                "overall",
                &emm_scale(s, None, cfg.weighting)?,
                Transform::None,
            );
        }
        for term in cfg
            .terms
            .iter()
            .filter(|x| s.design.encoder.vars.contains_key(*x))
        {
            emm_rows(
                &mut t,
                "scale",
                term,
                &emm_scale(s, Some(term), cfg.weighting)?,
                Transform::None,
            );
        }
        t.footnote("Scale rows report τ² with endpoint-wise transformed intervals; SE is on the log scale.");
    }
    if tr != Transform::None {
        t.footnote(format!(
            "Location estimates and intervals are back-transformed with {tr:?}."
        ));
    }
    if let Some(r) = rf {
        t.footnote(robust_note(r));
    }
    Ok((t, ct))
}

fn contrast_table() -> ResultTable {
    ResultTable::new("contrasts", "Contrasts")
        .column("term", "Term", ColumnKind::Text)
        .column("comparison", "Comparison", ColumnKind::Text)
        .column("estimate", "Estimate", ColumnKind::Number)
        .column("se", "SE", ColumnKind::Number)
        .column("stat", "Statistic", ColumnKind::Number)
        .column("df", "df", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
        .column("p_adjusted", "Adjusted p", ColumnKind::Pvalue)
        .column("ci_lb", "Lower CI", ColumnKind::Number)
        .column("ci_ub", "Upper CI", ColumnKind::Number)
}

fn contrast_rows(t: &mut ResultTable, term: &str, rows: &[ContrastRow]) {
    for r in rows {
        t.push_row(vec![
            term.into(),
            r.comparison.as_str().into(),
            r.estimate.into(),
            r.se.into(),
            r.stat.into(),
            Cell::from(r.df),
            r.p.into(),
            r.p_adjusted.into(),
            r.ci_lb.into(),
            r.ci_ub.into(),
        ]);
    }
}

pub fn diagnostics(
    fit: &UniFit,
    rows: &[CaseDiagnostics],
    row_ids: &[usize],
    labels: Option<&[String]>,
) -> ResultTable {
    let mut t = ResultTable::new("diagnostics", "Influence Diagnostics")
        .column("row", "Row", ColumnKind::Integer)
        .column("label", "Study", ColumnKind::Text)
        .column("weight", "Weight (%)", ColumnKind::Number)
        .column("rstandard", "Standardized residual", ColumnKind::Number)
        .column("rstudent", "Studentized residual", ColumnKind::Number)
        .column("hat", "Hat", ColumnKind::Number)
        .column("cooks_d", "Cook's distance", ColumnKind::Number)
        .column("loo_tau2", "τ² (deleted)", ColumnKind::Number)
        .column("loo_qe", "Q_E (deleted)", ColumnKind::Number);
    let names: Vec<String> = fit.coef_names().to_vec();
    for n in &names {
        t = t.column(
            &format!("dfbetas_{n}"),
            &format!("DFBETAS {n}"),
            ColumnKind::Number,
        );
    }
    t = t.column("note", "Note", ColumnKind::Text);
    let total: f64 = fit.weights.iter().sum();
    for d in rows {
        let i = d.position;
        let mut row = vec![
            Cell::from(row_ids[i]),
            text(labels.map(|l| l[i].as_str())),
            (100.0 * fit.weights[i] / total).into(),
            d.rstandard.into(),
            Cell::from(d.rstudent),
            d.hat.into(),
            Cell::from(d.cooks_d),
            Cell::from(d.loo_tau2),
            Cell::from(d.loo_qe),
        ];
        for j in 0..names.len() {
            row.push(Cell::from(d.dfbetas.as_ref().map(|b| b[j])));
        }
        row.push(text(d.note.as_deref()));
        t.push_row(row);
    }
    t
}

#[derive(Default)]
pub struct PubbiasResults {
    pub egger: Option<Result<EggerResult>>,
    pub begg: Option<Result<BeggResult>>,
    pub trim_fill: Option<Result<TrimFillResult>>,
    pub failsafe: Option<Result<FailSafe>>,
}

pub fn pubbias(r: &PubbiasResults, level: f64, tr: Transform) -> ResultTable {
    let mut t = ResultTable::new("pubbias", "Publication Bias")
        .column("test", "", ColumnKind::Text)
        .column("statistic", "Statistic", ColumnKind::Text)
        .column("estimate", "Estimate", ColumnKind::Number)
        .column("stat", "Value", ColumnKind::Number)
        .column("df", "df", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
        .column("k", "k", ColumnKind::Integer)
        .column("ci_lb", "Lower CI", ColumnKind::Number)
        .column("ci_ub", "Upper CI", ColumnKind::Number)
        .column("note", "Note", ColumnKind::Text);
    let err_row = |t: &mut ResultTable, name: &str, e: &metakit::MetaError| {
        t.push_row(vec![
            name.into(),
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Null,
            e.to_string().into(),
        ]);
    };
    match &r.egger {
        Some(Ok(e)) => t.push_row(vec![
            "Egger regression".into(),
            if e.df.is_some() { "t" } else { "z" }.into(),
            e.slope.into(),
            e.stat.into(),
            Cell::from(e.df),
            e.p.into(),
            Cell::Null,
            Cell::Null,
            Cell::Null,
            format!("limit estimate {}", e.intercept).into(),
        ]),
        Some(Err(e)) => err_row(&mut t, "Egger regression", e),
        None => {}
    }
    match &r.begg {
        Some(Ok(b)) => t.push_row(vec![
            "Rank correlation".into(),
            "Kendall tau".into(),
            b.tau.into(),
            b.s.into(),
            Cell::Null,
            b.p.into(),
            b.k_used.into(),
            Cell::Null,
            Cell::Null,
            (if b.exact {
                "exact p"
            } else {
                "normal approximation"
            })
            .into(),
        ]),
        Some(Err(e)) => err_row(&mut t, "Rank correlation", e),
        None => {}
    }
    match &r.trim_fill {
        Some(Ok(tf)) => {
            let pr: Prediction = prediction_interval(&tf.adjusted_fit, level);
            let (e, lb, ub) = transformed(tr, pr.pred, pr.ci_lb, pr.ci_ub);
            let side = format!("{:?}", tf.side).to_lowercase();
            t.push_row(vec![
                "Trim and fill".into(),
                "k0".into(),
                e.into(),
                Cell::Null,
                Cell::Null,
                Cell::Null,
                tf.k0.into(),
                lb.into(),
                ub.into(),
                format!(
                    "{} imputed on the {side} side{}",
                    tf.k0,
                    if tf.converged {
                        ""
                    } else {
                        "; did not converge"
                    }
                )
                .into(),
            ]);
        }
        Some(Err(e)) => err_row(&mut t, "Trim and fill", e),
        None => {}
    }
    match &r.failsafe {
        Some(Ok(f)) => t.push_row(vec![
            "Fail-safe N".into(),
            format!("{:?}", f.method).into(),
            f.real.into(),
            Cell::Null,
            Cell::Null,
            Cell::Null,
            Cell::Int(f.n as i64),
            Cell::Null,
            Cell::Null,
            text(f.flag.as_deref()),
        ]),
        Some(Err(e)) => err_row(&mut t, "Fail-safe N", e),
        None => {}
    }
    t
}
