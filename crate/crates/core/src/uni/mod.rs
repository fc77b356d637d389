//! Univariate fixed-, random- and mixed-effects models.

pub mod het;
pub mod mh;
pub mod scale;
pub mod subgroup;
pub mod tau2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{chisq_sf, f_sf, Reference};
use crate::error::{MetaError, Result};
use crate::ingest::{CompleteCaseReport, Dataset};
use crate::kernel::{
    build_design, fit_criteria, ml_from_fit, reml_from_fit, wls_fit, Cholesky, DesignMatrix,
    FitCriteria, MarginalCovariance, Term,
};

pub use het::{ci_tau2_qprofile, heterogeneity_stats, Tau2Interval};
pub use scale::{fit_location_scale, ScaleFit};
pub use tau2::{estimate_tau2, Method, Tau2Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    #[default]
    #[serde(alias = "knha")]
    KnappHartung,
    #[serde(alias = "z")]
    WaldZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Exp,
    Tanh,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Exp => x.exp(),
            Transform::Tanh => x.tanh(),
        }
    }
}

/// Apply a monotone transform to an estimate and its interval.
pub fn transform_estimates(point: f64, ci: (f64, f64), transform: Transform) -> (f64, (f64, f64)) {
    (
        transform.apply(point),
        (transform.apply(ci.0), transform.apply(ci.1)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniModelSpec {
    pub method: Method,
    pub test: TestKind,
    pub fixed_tau2: Option<f64>,
    pub ci_level: f64,
    /// Truncate the Knapp-Hartung scale at 1.
    pub kh_truncate: bool,
    pub transform: Transform,
}

impl Default for UniModelSpec {
    fn default() -> Self {
        UniModelSpec {
            method: Method::Reml,
            test: TestKind::KnappHartung,
            fixed_tau2: None,
            ci_level: 0.95,
            kh_truncate: false,
            transform: Transform::None,
        }
    }
}

impl UniModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(MetaError::schema("ci_level must lie in (0, 1)"));
        }
        if let Some(t) = self.fixed_tau2 {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(MetaError::schema("fixed_tau2 must be a nonnegative number"));
            }
        }
        Ok(())
    }
}

/// One coefficient with its test and interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coef {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub stat: f64,
    pub df: Option<f64>,
    pub p: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
}

/// Omnibus Wald test: chi-square (`df2 = None`) or F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub stat: f64,
    pub df1: f64,
    pub df2: Option<f64>,
    pub p: f64,
}

/// Estimate of a linear combination c'b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub se: f64,
    pub stat: f64,
    pub p: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
}

#[derive(Debug, Clone)]
pub struct UniFit {
    pub spec: UniModelSpec,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    pub design: DesignMatrix,
    pub k: usize,
    pub p: usize,
    pub b: DVector<f64>,
    /// Coefficient covariance, Knapp-Hartung scaled when applicable.
    pub vb: DMatrix<f64>,
    pub vb_unscaled: DMatrix<f64>,
    pub reference: Reference,
    pub kh_scale: f64,
    pub tau2: f64,
    pub se_tau2: Option<f64>,
    pub tau2_flag: Option<String>,
    pub tau2_fixed: bool,
    pub qe: f64,
    pub qe_df: usize,
    pub qe_p: f64,
    pub qm: Option<WaldTest>,
    pub i2: f64,
    pub h2: f64,
    /// Typical within-study variance used by I² and H².
    pub vt: f64,
    pub loglik_ml: f64,
    pub loglik_reml: f64,
    pub fit_ml: FitCriteria,
    pub fit_reml: Option<FitCriteria>,
    /// 1 / (vᵢ + τ²ᵢ).
    pub weights: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub scale: Option<ScaleFit>,
}

impl UniFit {
    pub fn df_resid(&self) -> usize {
        self.k - self.p
    }

    /// Fit statistics on the likelihood the method optimises.
    pub fn criteria(&self) -> FitCriteria {
        match (self.spec.method, self.fit_reml) {
            (Method::Reml, Some(c)) => c,
            _ => self.fit_ml,
        }
    }

    pub fn loglik(&self) -> f64 {
        self.criteria().loglik
    }

    /// Per-row heterogeneity (constant unless a scale model is present).
    pub fn tau2_rows(&self) -> DVector<f64> {
        match &self.scale {
            Some(s) => s.tau2_i.clone(),
            None => DVector::from_element(self.k, self.tau2),
        }
    }

    pub fn coef_names(&self) -> &[String] {
        &self.design.encoder.column_names
    }

    pub fn coefs(&self) -> Vec<Coef> {
        coef_table(
            self.coef_names(),
            &self.b,
            &self.vb,
            self.reference,
            self.spec.ci_level,
        )
    }

    /// c'b with its standard error, test against `null` and interval.
    pub fn linear_combination(&self, c: &DVector<f64>, null: f64) -> Estimate {
        linear_estimate(
            &self.b,
            &self.vb,
            c,
            null,
            self.reference,
            self.spec.ci_level,
        )
    }

    /// Wald test that the coefficients in `cols` are jointly zero.
    pub fn wald(&self, cols: &[usize]) -> Result<WaldTest> {
        wald_test(&self.b, &self.vb, cols, self.reference)
    }

    /// Omnibus test of one model term (all its columns).
    pub fn term_test(&self, term: &str) -> Result<WaldTest> {
        let r = self
            .design
            .encoder
            .term_range(term)
            .ok_or_else(|| MetaError::schema(format!("term '{term}' is not in the model")))?;
        self.wald(&r.collect::<Vec<_>>())
    }
}

/// Per-coefficient tests and intervals.
pub fn coef_table(
    names: &[String],
    b: &DVector<f64>,
    vb: &DMatrix<f64>,
    reference: Reference,
    level: f64,
) -> Vec<Coef> {
    let crit = reference.critical(level);
    (0..b.len())
        .map(|j| {
            let se = vb[(j, j)].max(0.0).sqrt();
            let stat = b[j] / se;
            Coef {
                name: names[j].clone(),
                estimate: b[j],
                se,
                stat,
                df: reference.df(),
                p: reference.two_sided_p(stat),
                ci_lb: b[j] - crit * se,
                ci_ub: b[j] + crit * se,
            }
        })
        .collect()
}

pub fn linear_estimate(
    b: &DVector<f64>,
    vb: &DMatrix<f64>,
    c: &DVector<f64>,
    null: f64,
    reference: Reference,
    level: f64,
) -> Estimate {
    let est = c.dot(b);
    let se = (c.transpose() * vb * c)[(0, 0)].max(0.0).sqrt();
    let stat = if se > 0.0 {
        (est - null) / se
    } else if est == null {
        0.0
    } else {
        f64::NAN
    };
    let crit = reference.critical(level);
    Estimate {
        estimate: est,
        se,
        stat,
        p: if se > 0.0 || est == null {
            reference.two_sided_p(stat)
        } else {
            f64::NAN
        },
        ci_lb: est - crit * se,
        ci_ub: est + crit * se,
    }
}

pub(crate) fn wald_test(
    b: &DVector<f64>,
    vb: &DMatrix<f64>,
    cols: &[usize],
    reference: Reference,
) -> Result<WaldTest> {
    if cols.is_empty() {
        return Err(MetaError::schema("empty Wald test"));
    }
    let m = cols.len();
    let bs = DVector::from_iterator(m, cols.iter().map(|&j| b[j]));
    let vs = DMatrix::from_fn(m, m, |i, j| vb[(cols[i], cols[j])]);
    let chol = Cholesky::new(&vs)?;
    let stat = bs.dot(&chol.solve_vec(&bs));
    Ok(match reference {
        Reference::Z => WaldTest {
            stat,
            df1: m as f64,
            df2: None,
            p: chisq_sf(stat, m as f64),
        },
        Reference::T(df) => {
            let f = stat / m as f64;
            WaldTest {
                stat: f,
                df1: m as f64,
                df2: Some(df),
                p: f_sf(f, m as f64, df),
            }
        }
    })
}

/// Columns tested by the omnibus moderator test.
pub(crate) fn moderator_columns(design: &DesignMatrix) -> Vec<usize> {
    let start = usize::from(design.encoder.intercept);
    (start..design.p()).collect()
}

/// Fit a univariate model.
pub fn fit_uni(
    spec: &UniModelSpec,
    y: &DVector<f64>,
    v: &DVector<f64>,
    design: &DesignMatrix,
) -> Result<UniFit> {
    spec.validate()?;
    tau2::check_dims(y, v, &design.x)?;
    let (est, fixed) = match spec.fixed_tau2 {
        Some(t) => (
            Tau2Estimate {
                tau2: t,
                flag: None,
            },
            true,
        ),
        None => (estimate_tau2(spec.method, y, v, &design.x)?, false),
    };
    let se = if fixed {
        None
    } else {
        tau2::se_tau2(spec.method, v, &design.x, est.tau2)?
    };
    let rows = DVector::from_element(y.len(), est.tau2);
    let mut fit = fit_given_tau2(
        spec,
        y,
        v,
        design,
        &rows,
        !fixed && spec.method != Method::Fe,
    )?;
    fit.tau2 = est.tau2;
    fit.se_tau2 = se;
    fit.tau2_flag = est.flag;
    fit.tau2_fixed = fixed;
    let (i2, h2, vt) = if spec.method == Method::Fe && !fixed {
        het::fe_heterogeneity(fit.qe, fit.qe_df)
    } else {
        heterogeneity_stats(est.tau2, v, &design.x)?
    };
    fit.i2 = i2;
    fit.h2 = h2;
    fit.vt = vt;
    Ok(fit)
}

/// GLS, tests and likelihoods for known per-row τ².
pub(crate) fn fit_given_tau2(
    spec: &UniModelSpec,
    y: &DVector<f64>,
    v: &DVector<f64>,
    design: &DesignMatrix,
    tau2_rows: &DVector<f64>,
    tau2_estimated: bool,
) -> Result<UniFit> {
    let x = &design.x;
    let (k, p) = x.shape();
    let m = MarginalCovariance::Diagonal(v + tau2_rows);
    let g = wls_fit(y, x, &m)?;
    let df = (k - p) as f64;
    let (reference, kh_scale) = match spec.test {
        TestKind::WaldZ => (Reference::Z, 1.0),
        TestKind::KnappHartung => {
            let s2 = g.rss_weighted / df;
            (
                Reference::T(df),
                if spec.kh_truncate { s2.max(1.0) } else { s2 },
            )
        }
    };
    let vb = &g.cov_b * kh_scale;
    let fe = wls_fit(y, x, &MarginalCovariance::Diagonal(v.clone()))?;
    let qe = fe.rss_weighted;
    let mods = moderator_columns(design);
    let qm = if mods.is_empty() {
        None
    } else {
        Some(wald_test(&g.b, &vb, &mods, reference)?)
    };
    let ll_ml = ml_from_fit(&g, k);
    let ll_reml = reml_from_fit(&g, x);
    let parms = p + usize::from(tau2_estimated);
    let sat: f64 = v
        .iter()
        .map(|vi| (2.0 * std::f64::consts::PI * vi).ln())
        .sum();
    let fit_ml = fit_criteria(ll_ml, -2.0 * ll_ml - sat, parms, k);
    let fit_reml = Some(fit_criteria(ll_reml, -2.0 * ll_reml, parms, k - p));
    Ok(UniFit {
        spec: spec.clone(),
        y: y.clone(),
        v: v.clone(),
        design: design.clone(),
        k,
        p,
        b: g.b.clone(),
        vb,
        vb_unscaled: g.cov_b.clone(),
        reference,
        kh_scale,
        tau2: tau2_rows.mean(),
        se_tau2: None,
        tau2_flag: None,
        tau2_fixed: false,
        qe,
        qe_df: k - p,
        qe_p: chisq_sf(qe, df),
        qm,
        i2: f64::NAN,
        h2: f64::NAN,
        vt: f64::NAN,
        loglik_ml: ll_ml,
        loglik_reml: ll_reml,
        fit_ml,
        fit_reml,
        weights: (v + tau2_rows).map(|e| 1.0 / e),
        fitted: g.fitted,
        residuals: g.residuals,
        scale: None,
    })
}

/// Pooled (or mean-covariate) prediction with confidence and prediction intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub pred: f64,
    pub se: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
    pub pi_lb: f64,
    pub pi_ub: f64,
}

/// Prediction interval for the true effect of a new study. For models with
/// moderators the prediction is made at the column means of X.
pub fn prediction_interval(fit: &UniFit, level: f64) -> Prediction {
    let x = &fit.design.x;
    let c = DVector::from_iterator(fit.p, (0..fit.p).map(|j| x.column(j).mean()));
    let tau2 = match &fit.scale {
        Some(s) => {
            let zbar = DVector::from_iterator(
                s.design.p(),
                (0..s.design.p()).map(|j| s.design.x.column(j).mean()),
            );
            zbar.dot(&s.alpha).exp()
        }
        None => fit.tau2,
    };
    predict_row(fit, &c, tau2, level)
}

pub fn predict_row(fit: &UniFit, c: &DVector<f64>, tau2: f64, level: f64) -> Prediction {
    let pred = c.dot(&fit.b);
    let var = (c.transpose() * &fit.vb * c)[(0, 0)].max(0.0);
    let q = fit.reference.critical(level);
    let se = var.sqrt();
    let pse = (var + tau2).sqrt();
    Prediction {
        pred,
        se,
        ci_lb: pred - q * se,
        ci_ub: pred + q * se,
        pi_lb: pred - q * pse,
        pi_ub: pred + q * pse,
    }
}

/// Analysis-ready vectors after list-wise deletion.
#[derive(Debug, Clone)]
pub struct UniData {
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    pub design: DesignMatrix,
    pub scale_design: Option<DesignMatrix>,
    pub data: Dataset,
    pub complete: CompleteCaseReport,
}

/// Which columns define a univariate model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UniColumns {
    pub yi: String,
    pub vi: String,
    pub terms: Vec<Term>,
    pub intercept: bool,
    pub scale_terms: Option<Vec<Term>>,
    pub scale_intercept: bool,
}

impl UniColumns {
    pub fn intercept_only(yi: &str, vi: &str) -> Self {
        UniColumns {
            yi: yi.into(),
            vi: vi.into(),
            intercept: true,
            scale_intercept: true,
            ..Default::default()
        }
    }

    pub fn required(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = vec![&self.yi, &self.vi];
        let scale = self.scale_terms.iter().flatten();
        for t in self.terms.iter().chain(scale) {
            for v in &t.vars {
                if !cols.contains(&v.as_str()) {
                    cols.push(v);
                }
            }
        }
        cols
    }
}

/// List-wise deletion plus design construction.
pub fn prepare(d: &Dataset, cols: &UniColumns) -> Result<UniData> {
    let complete = d.complete_cases(&cols.required())?;
    let data = d.select_row_ids(&complete.kept_row_ids);
    let y = DVector::from_iterator(
        data.nrows(),
        data.real(&cols.yi)?.iter().map(|v| v.expect("complete")),
    );
    let v = DVector::from_iterator(
        data.nrows(),
        data.real(&cols.vi)?.iter().map(|v| v.expect("complete")),
    );
    let design = build_design(&data, &cols.terms, cols.intercept)?;
    let scale_design = match &cols.scale_terms {
        Some(t) => Some(build_design(&data, t, cols.scale_intercept)?),
        None => None,
    };
    Ok(UniData {
        y,
        v,
        design,
        scale_design,
        data,
        complete,
    })
}

/// Prepare and fit in one step (location-scale when scale terms are present).
pub fn fit_dataset(
    spec: &UniModelSpec,
    d: &Dataset,
    cols: &UniColumns,
) -> Result<(UniFit, UniData)> {
    let ud = prepare(d, cols)?;
    let fit = match &ud.scale_design {
        Some(z) => fit_location_scale(spec, &ud.y, &ud.v, &ud.design, z)?,
        None => fit_uni(spec, &ud.y, &ud.v, &ud.design)?,
    };
    Ok((fit, ud))
}
