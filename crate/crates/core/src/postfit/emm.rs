//! Estimated marginal means and pairwise contrasts.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::LinearFit;
use crate::error::{MetaError, Result};
use crate::kernel::{DesignMatrix, RowValues, VarKind, VarValue};
use crate::uni::{Estimate, ScaleFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Average over the observed rows.
    #[default]
    Weighted,
    /// Equal weight per combination of the other factors' levels.
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    #[default]
    None,
    Bonferroni,
    Holm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmmRow {
    pub level: String,
    /// Moderator value for continuous focal terms.
    pub value: Option<f64>,
    pub estimate: f64,
    pub se: f64,
    pub stat: f64,
    pub df: Option<f64>,
    pub p: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
    #[serde(skip)]
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastRow {
    pub comparison: String,
    pub estimate: f64,
    pub se: f64,
    pub stat: f64,
    pub df: Option<f64>,
    pub p: f64,
    pub p_adjusted: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
}

fn row_from(
    level: String,
    value: Option<f64>,
    e: Estimate,
    df: Option<f64>,
    c: DVector<f64>,
) -> EmmRow {
    EmmRow {
        level,
        value,
        estimate: e.estimate,
        se: e.se,
        stat: e.stat,
        df,
        p: e.p,
        ci_lb: e.ci_lb,
        ci_ub: e.ci_ub,
        c,
    }
}

fn continuous_mean_sd(design: &DesignMatrix, var: &str) -> (f64, f64) {
    let vals: Vec<f64> = design
        .rows
        .iter()
        .filter_map(|r| match r.get(var) {
            Some(VarValue::Real(x)) => Some(*x),
            _ => None,
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, sd)
}

/// Coefficient vector of the marginal mean with `focal` fixed at `value`.
pub fn reference_vector(
    design: &DesignMatrix,
    focal: Option<(&str, VarValue)>,
    weighting: Weighting,
) -> Result<DVector<f64>> {
    reference_vector_at(design, focal.as_slice(), weighting)
}

/// As [`reference_vector`] with several variables held fixed.
pub fn reference_vector_at(
    design: &DesignMatrix,
    fixed: &[(&str, VarValue)],
    weighting: Weighting,
) -> Result<DVector<f64>> {
    let enc = &design.encoder;
    let p = enc.ncols();
    match weighting {
        Weighting::Weighted => {
            let k = design.rows.len();
            if k == 0 {
                return Err(MetaError::InsufficientData(
                    "no rows to average over".into(),
                ));
            }
            let mut acc = DVector::zeros(p);
            for r in &design.rows {
                let mut row = r.clone();
                for (name, v) in fixed {
                    row.insert(name.to_string(), v.clone());
                }
                acc += DVector::from_vec(enc.encode(&row)?);
            }
            Ok(acc / k as f64)
        }
        Weighting::Unweighted => {
            let mut row = RowValues::new();
            for (name, kind) in &enc.vars {
                let value = match kind {
                    VarKind::Continuous => VarValue::Real(continuous_mean_sd(design, name).0),
                    VarKind::Categorical { levels } => {
                        let w = 1.0 / levels.len() as f64;
                        VarValue::Mixture(levels.iter().map(|l| (l.clone(), w)).collect())
                    }
                };
                row.insert(name.clone(), value);
            }
            for (name, v) in fixed {
                row.insert(name.to_string(), v.clone());
            }
            Ok(DVector::from_vec(enc.encode(&row)?))
        }
    }
}

fn focal_kind<'a>(design: &'a DesignMatrix, term: &str) -> Result<&'a VarKind> {
    design
        .encoder
        .vars
        .get(term)
        .ok_or_else(|| MetaError::schema(format!("term '{term}' is not in the model")))
}

/// Marginal means over the levels of `term` (or the overall mean when `term`
/// is `None`). Continuous terms are evaluated at mean ± 1 SD.
pub fn emm(
    fit: &dyn LinearFit,
    term: Option<&str>,
    weighting: Weighting,
    test_against: f64,
) -> Result<Vec<EmmRow>> {
    let design = fit.design();
    let Some(term) = term else {
        let c = reference_vector(design, None, weighting)?;
        let e = fit.estimate(&c, test_against);
        return Ok(vec![row_from(
            "overall".into(),
            None,
            e,
            fit.reference_for(&c).df(),
            c,
        )]);
    };
    match focal_kind(design, term)? {
        VarKind::Continuous => emm_continuous(fit, term, weighting, test_against),
        VarKind::Categorical { levels } => levels
            .iter()
            .map(|l| {
                let c =
                    reference_vector(design, Some((term, VarValue::Level(l.clone()))), weighting)?;
                let e = fit.estimate(&c, test_against);
                Ok(row_from(l.clone(), None, e, fit.reference_for(&c).df(), c))
            })
            .collect(),
    }
}

/// Marginal means at the moderator's mean − 1 SD and mean + 1 SD.
pub fn emm_continuous(
    fit: &dyn LinearFit,
    term: &str,
    weighting: Weighting,
    test_against: f64,
) -> Result<Vec<EmmRow>> {
    let design = fit.design();
    if !matches!(focal_kind(design, term)?, VarKind::Continuous) {
        return Err(MetaError::schema(format!(
            "term '{term}' is not continuous"
        )));
    }
    let (mean, sd) = continuous_mean_sd(design, term);
    if !(sd > 0.0) {
        return Err(MetaError::Domain(format!(
            "moderator '{term}' has no variance"
        )));
    }
    [("mean - 1SD", mean - sd), ("mean + 1SD", mean + sd)]
        .into_iter()
        .map(|(label, x)| {
            let c = reference_vector(design, Some((term, VarValue::Real(x))), weighting)?;
            let e = fit.estimate(&c, test_against);
            Ok(row_from(
                label.into(),
                Some(x),
                e,
                fit.reference_for(&c).df(),
                c,
            ))
        })
        .collect()
}

fn adjust(p: &[f64], how: Adjustment) -> Vec<f64> {
    let m = p.len() as f64;
    match how {
        Adjustment::None => p.to_vec(),
        Adjustment::Bonferroni => p.iter().map(|p| (p * m).min(1.0)).collect(),
        Adjustment::Holm => {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap_or(std::cmp::Ordering::Equal));
            let mut out = vec![0.0; p.len()];
            let mut running: f64 = 0.0;
            for (rank, &i) in idx.iter().enumerate() {
                running = running.max(((m - rank as f64) * p[i]).min(1.0));
                out[i] = running;
            }
            out
        }
    }
}

/// All pairwise differences between the marginal means of a factor.
pub fn contrasts(
    fit: &dyn LinearFit,
    term: &str,
    weighting: Weighting,
    adjustment: Adjustment,
) -> Result<Vec<ContrastRow>> {
    let levels = match focal_kind(fit.design(), term)? {
        VarKind::Categorical { levels } if levels.len() >= 2 => levels.clone(),
        _ => {
            return Err(MetaError::schema(format!(
                "contrasts need a factor with at least two levels ('{term}')"
            )))
        }
    };
    let rows = emm(fit, Some(term), weighting, 0.0)?;
    let mut out = Vec::new();
    for i in 0..levels.len() {
        for j in (i + 1)..levels.len() {
            let c = &rows[i].c - &rows[j].c;
            let e = fit.estimate(&c, 0.0);
            out.push(ContrastRow {
                comparison: format!("{} - {}", levels[i], levels[j]),
                estimate: rows[i].estimate - rows[j].estimate,
                se: e.se,
                stat: e.stat,
                df: fit.reference_for(&c).df(),
                p: e.p,
                p_adjusted: e.p,
                ci_lb: e.ci_lb,
                ci_ub: e.ci_ub,
            });
        }
    }
    let adj = adjust(&out.iter().map(|r| r.p).collect::<Vec<_>>(), adjustment);
    for (r, p) in out.iter_mut().zip(adj) {
        r.p_adjusted = p;
    }
    Ok(out)
}

/// Marginal heterogeneity from a scale model, reported as τ² = exp(z'α) with
/// the interval transformed endpoint-wise. `se` stays on the log scale.
pub fn emm_scale(
    scale: &ScaleFit,
    term: Option<&str>,
    weighting: Weighting,
) -> Result<Vec<EmmRow>> {
    let design = &scale.design;
    let mut points: Vec<(String, Option<f64>, Option<(String, VarValue)>)> = Vec::new();
    match term {
        None => points.push(("overall".into(), None, None)),
        Some(t) => match focal_kind(design, t)? {
            VarKind::Continuous => {
                let (mean, sd) = continuous_mean_sd(design, t);
                if !(sd > 0.0) {
                    return Err(MetaError::Domain(format!(
                        "moderator '{t}' has no variance"
                    )));
                }
                for (label, x) in [("mean - 1SD", mean - sd), ("mean + 1SD", mean + sd)] {
                    points.push((
                        label.into(),
                        Some(x),
                        Some((t.to_string(), VarValue::Real(x))),
                    ));
                }
            }
            VarKind::Categorical { levels } => {
                for l in levels {
                    points.push((
                        l.clone(),
                        None,
                        Some((t.to_string(), VarValue::Level(l.clone()))),
                    ));
                }
            }
        },
    }
    points
        .into_iter()
        .map(|(label, value, focal)| {
            let c = reference_vector(
                design,
                focal.as_ref().map(|(n, v)| (n.as_str(), v.clone())),
                weighting,
            )?;
            let e = scale.linear_combination(&c, 0.0);
            Ok(EmmRow {
                level: label,
                value,
                estimate: e.estimate.exp(),
                se: e.se,
                stat: f64::NAN,
                df: None,
                p: f64::NAN,
                ci_lb: e.ci_lb.exp(),
                ci_ub: e.ci_ub.exp(),
                c,
            })
        })
        .collect()
}
