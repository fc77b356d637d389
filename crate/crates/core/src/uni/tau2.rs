//! Between-study variance estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};
use crate::kernel::{ml_loglik, reml_loglik, Cholesky, MarginalCovariance};
use crate::optim::{bisect, brent_minimize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Method {
    #[default]
    #[serde(rename = "REML")]
    Reml,
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "DL")]
    Dl,
    #[serde(rename = "PM")]
    Pm,
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "FE", alias = "EE")]
    Fe,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Reml => "REML",
            Method::Ml => "ML",
            Method::Dl => "DL",
            Method::Pm => "PM",
            Method::He => "HE",
            Method::Fe => "FE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tau2Estimate {
    pub tau2: f64,
    /// Set when the estimator hit a boundary it could not resolve.
    pub flag: Option<String>,
}

/// P = W − W X (X'WX)⁻¹ X' W with W = diag(1/(v + τ²)).
pub fn projection(x: &DMatrix<f64>, v: &DVector<f64>, tau2: f64) -> Result<DMatrix<f64>> {
    let w = v.map(|vi| 1.0 / (vi + tau2));
    weighted_projection(x, &w)
}

pub(crate) fn weighted_projection(x: &DMatrix<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = x.nrows();
    let wx = DMatrix::from_fn(k, x.ncols(), |i, j| w[i] * x[(i, j)]);
    let info = x.transpose() * &wx;
    let chol = Cholesky::new(&info).map_err(|_| MetaError::SingularDesign {
        terms: vec!["<weighted design>".into()],
    })?;
    let mut p = -(&wx * chol.solve(&wx.transpose()));
    for i in 0..k {
        p[(i, i)] += w[i];
    }
    Ok(p)
}

/// Generalized Q: y' P(τ²) y.
pub fn q_gen(y: &DVector<f64>, x: &DMatrix<f64>, v: &DVector<f64>, tau2: f64) -> Result<f64> {
    let p = projection(x, v, tau2)?;
    Ok((y.transpose() * &p * y)[(0, 0)])
}

fn sample_var(y: &DVector<f64>) -> f64 {
    let k = y.len() as f64;
    let m = y.mean();
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)
}

pub(crate) fn check_dims(y: &DVector<f64>, v: &DVector<f64>, x: &DMatrix<f64>) -> Result<()> {
    let (k, p) = x.shape();
    if y.len() != k || v.len() != k {
        return Err(MetaError::schema("y, v and X have different lengths"));
    }
    if k <= p {
        return Err(MetaError::InsufficientData(format!(
            "need more studies than coefficients (k = {k}, p = {p})"
        )));
    }
    if v.iter().any(|vi| !(*vi > 0.0) || !vi.is_finite()) {
        return Err(MetaError::Domain(
            "sampling variances must be positive".into(),
        ));
    }
    Ok(())
}

/// Estimate τ² with the given method.
pub fn estimate_tau2(
    method: Method,
    y: &DVector<f64>,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<Tau2Estimate> {
    check_dims(y, v, x)?;
    let (k, p) = x.shape();
    let df = (k - p) as f64;
    let ok = |tau2: f64| Ok(Tau2Estimate { tau2, flag: None });
    match method {
        Method::Fe => ok(0.0),
        Method::Dl => {
            let pm = projection(x, v, 0.0)?;
            let q = (y.transpose() * &pm * y)[(0, 0)];
            ok(((q - df) / pm.trace()).max(0.0))
        }
        Method::He => {
            let zero = DVector::from_element(k, 1.0);
            let pols = weighted_projection(x, &zero)?;
            let rss = (y.transpose() * &pols * y)[(0, 0)];
            let trpv: f64 = (0..k).map(|i| pols[(i, i)] * v[i]).sum();
            ok(((rss - trpv) / df).max(0.0))
        }
        Method::Pm => {
            let g = |t: f64| q_gen(y, x, v, t).map(|q| q - df);
            if g(0.0)? <= 0.0 {
                return ok(0.0);
            }
            let mut upper = (10.0 * sample_var(y)).max(1e-8);
            let mut tries = 0;
            while g(upper)? > 0.0 {
                upper *= 10.0;
                tries += 1;
                if tries > 8 {
                    return Ok(Tau2Estimate {
                        tau2: upper,
                        flag: Some("no sign change in the bracket".into()),
                    });
                }
            }
            let root =
                bisect(|t| g(t).unwrap_or(f64::NAN), 0.0, upper, 1e-12 * upper).expect("bracketed");
            ok(root)
        }
        Method::Reml | Method::Ml => likelihood_tau2(method, y, v, x),
    }
}

fn loglik_at(
    method: Method,
    y: &DVector<f64>,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
    tau2: f64,
) -> f64 {
    let m = MarginalCovariance::Diagonal(v.map(|vi| vi + tau2));
    let r = if method == Method::Reml {
        reml_loglik(y, x, &m)
    } else {
        ml_loglik(y, x, &m)
    };
    r.unwrap_or(f64::NEG_INFINITY)
}

/// Score and expected information for τ² under REML or ML.
fn score_info(
    method: Method,
    y: &DVector<f64>,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
    tau2: f64,
) -> Result<(f64, f64)> {
    let p = projection(x, v, tau2)?;
    let py = &p * y;
    if method == Method::Reml {
        let ppy = py.dot(&py);
        let trpp: f64 = p.iter().map(|e| e * e).sum();
        Ok((-0.5 * p.trace() + 0.5 * ppy, 0.5 * trpp))
    } else {
        let w = v.map(|vi| 1.0 / (vi + tau2));
        // P y equals W r at the GLS solution
        Ok((
            -0.5 * w.sum() + 0.5 * py.dot(&py),
            0.5 * w.iter().map(|e| e * e).sum::<f64>(),
        ))
    }
}

fn likelihood_tau2(
    method: Method,
    y: &DVector<f64>,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<Tau2Estimate> {
    let upper = 10.0 * sample_var(y);
    if !(upper > 0.0) {
        return Ok(Tau2Estimate {
            tau2: 0.0,
            flag: None,
        });
    }
    // The ML/REML surface in τ² can be bimodal; locate the global basin on a
    // grid that is dense near zero before refining with Brent.
    const GRID: usize = 40;
    let grid: Vec<f64> = (0..=GRID)
        .map(|i| upper * (i as f64 / GRID as f64).powi(2))
        .collect();
    let vals: Vec<f64> = grid
        .iter()
        .map(|&t| loglik_at(method, y, v, x, t))
        .collect();
    let j = (0..=GRID).fold(0, |best, i| if vals[i] > vals[best] { i } else { best });
    let lo = grid[j.saturating_sub(1)];
    let hi = grid[(j + 1).min(GRID)];
    let (mut t, fbrent) = brent_minimize(|t| -loglik_at(method, y, v, x, t), lo, hi, 1e-10 * upper);
    if j == 0 {
        let (s0, _) = score_info(method, y, v, x, 0.0)?;
        if s0 <= 0.0 || vals[0] >= -fbrent {
            return Ok(Tau2Estimate {
                tau2: 0.0,
                flag: None,
            });
        }
    }
    // Fisher scoring polish from the bracketed optimum. Expected information
    // can be well below the observed curvature, so a step is kept only when it
    // shrinks the score, halving it otherwise.
    for _ in 0..100 {
        let (s, info) = score_info(method, y, v, x, t)?;
        let mut step = s / info;
        let mut moved = false;
        for _ in 0..40 {
            let next = (t + step).max(0.0);
            if score_info(method, y, v, x, next)?.0.abs() < s.abs() {
                moved = (next - t).abs() > 1e-15 * t.max(1e-300);
                t = next;
                break;
            }
            step *= 0.5;
        }
        if !moved || t == 0.0 {
            break;
        }
    }
    Ok(Tau2Estimate {
        tau2: t,
        flag: None,
    })
}

/// Standard error of τ̂² (None where no closed form applies).
pub fn se_tau2(
    method: Method,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
    tau2: f64,
) -> Result<Option<f64>> {
    let (k, p) = x.shape();
    let df = (k - p) as f64;
    let sumsq = |m: &DMatrix<f64>| m.iter().map(|e| e * e).sum::<f64>();
    Ok(match method {
        Method::Fe => None,
        Method::Reml | Method::Pm => Some((2.0 / sumsq(&projection(x, v, tau2)?)).sqrt()),
        Method::Ml => Some((2.0 / v.iter().map(|vi| (vi + tau2).powi(-2)).sum::<f64>()).sqrt()),
        Method::Dl => {
            let pm = projection(x, v, 0.0)?;
            let tr = pm.trace();
            Some(((2.0 * df + 4.0 * tau2 * tr + 2.0 * tau2 * tau2 * sumsq(&pm)) / (tr * tr)).sqrt())
        }
        Method::He => {
            let pols = weighted_projection(x, &DVector::from_element(k, 1.0))?;
            let pv = DMatrix::from_fn(k, k, |i, j| pols[(i, j)] * v[j]);
            let tr_pvpv = (&pv * &pv).trace();
            Some(
                ((2.0 * tr_pvpv + 4.0 * tau2 * pv.trace() + 2.0 * tau2 * tau2 * df) / (df * df))
                    .sqrt(),
            )
        }
    })
}
