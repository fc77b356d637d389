//! Casewise influence diagnostics, Baujat coordinates, τ² likelihood profile
//! and residual funnel data.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{MetaError, Result};
use crate::kernel::{ml_loglik, reml_loglik, wls_fit, MarginalCovariance};
use crate::uni::{fit_location_scale, fit_uni, Method, UniFit, UniModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseDiagnostics {
    pub position: usize,
    pub rstandard: f64,
    pub rstudent: Option<f64>,
    pub hat: f64,
    pub cooks_d: Option<f64>,
    pub dfbetas: Option<Vec<f64>>,
    pub loo_tau2: Option<f64>,
    pub loo_qe: Option<f64>,
    pub note: Option<String>,
}

/// Refit without the row at `i`, keeping every model setting.
pub fn refit_without(fit: &UniFit, i: usize) -> Result<UniFit> {
    let keep: Vec<usize> = (0..fit.k).filter(|&j| j != i).collect();
    let y = DVector::from_iterator(keep.len(), keep.iter().map(|&j| fit.y[j]));
    let v = DVector::from_iterator(keep.len(), keep.iter().map(|&j| fit.v[j]));
    let design = fit.design.select(&keep);
    crate::kernel::check_rank(&design)?;
    match &fit.scale {
        Some(s) => {
            let z = s.design.select(&keep);
            fit_location_scale(&fit.spec, &y, &v, &design, &z)
        }
        None => fit_uni(&fit.spec, &y, &v, &design),
    }
}

fn tau2_for_row(fit: &UniFit, loo: &UniFit, i: usize) -> f64 {
    match (&fit.scale, &loo.scale) {
        (Some(s), Some(ls)) => s.design.x.row(i).transpose().dot(&ls.alpha).exp(),
        _ => loo.tau2,
    }
}

/// Standardized and studentized residuals, hat values, Cook's distances,
/// DFBETAS and leave-one-out heterogeneity for every row.
pub fn casewise_diagnostics(fit: &UniFit) -> Result<Vec<CaseDiagnostics>> {
    let x = &fit.design.x;
    let k = fit.k;
    let m = fit.v.clone() + fit.tau2_rows();
    let g = wls_fit(&fit.y, x, &MarginalCovariance::Diagonal(m.clone()))?;
    let hat = g.hat(x);
    // var(e) = M − X (X'WX)⁻¹ X'
    let xvx = x * &g.cov_b * x.transpose();
    let vb_inv = crate::kernel::Cholesky::new(&fit.vb)
        .map(|c| c.inverse())
        .ok();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let rstandard = g.residuals[i] / (m[i] - xvx[(i, i)]).sqrt();
        let mut row = CaseDiagnostics {
            position: i,
            rstandard,
            rstudent: None,
            hat: hat[(i, i)],
            cooks_d: None,
            dfbetas: None,
            loo_tau2: None,
            loo_qe: None,
            note: None,
        };
        if k <= fit.p + 1 {
            row.note = Some("too few rows for leave-one-out".into());
            out.push(row);
            continue;
        }
        match refit_without(fit, i) {
            Ok(loo) => {
                let xi = x.row(i).transpose();
                let delpred = xi.dot(&loo.b);
                let vdel = (xi.transpose() * &loo.vb * &xi)[(0, 0)];
                let t2 = tau2_for_row(fit, &loo, i);
                row.rstudent = Some((fit.y[i] - delpred) / (fit.v[i] + t2 + vdel).sqrt());
                let dfb = &fit.b - &loo.b;
                row.cooks_d = vb_inv
                    .as_ref()
                    .map(|vi| (dfb.transpose() * vi * &dfb)[(0, 0)]);
                row.dfbetas = Some((0..fit.p).map(|j| dfb[j] / loo.vb[(j, j)].sqrt()).collect());
                row.loo_tau2 = Some(loo.tau2);
                row.loo_qe = Some(loo.qe);
            }
            Err(e) => row.note = Some(format!("leave-one-out refit failed: {e}")),
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaujatPoint {
    pub position: usize,
    /// Contribution to QE.
    pub x: f64,
    /// Squared standardized shift of the fitted value when the row is left out.
    pub y: f64,
}

/// Baujat coordinates; the x values sum to QE.
pub fn baujat(fit: &UniFit) -> Result<Vec<BaujatPoint>> {
    let x = &fit.design.x;
    let fe = wls_fit(&fit.y, x, &MarginalCovariance::Diagonal(fit.v.clone()))?;
    (0..fit.k)
        .map(|i| {
            let xi = x.row(i).transpose();
            let bx = fe.residuals[i].powi(2) / fit.v[i];
            let by = match refit_without(fit, i) {
                Ok(loo) => {
                    let vdel = (xi.transpose() * &loo.vb * &xi)[(0, 0)];
                    (xi.dot(&fit.b) - xi.dot(&loo.b)).powi(2) / vdel
                }
                Err(_) => f64::NAN,
            };
            Ok(BaujatPoint {
                position: i,
                x: bx,
                y: by,
            })
        })
        .collect()
}

/// Log-likelihood (restricted for REML fits) over a τ² grid, b profiled out.
pub fn profile_tau2(fit: &UniFit, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if fit.scale.is_some() {
        return Err(MetaError::schema(
            "the τ² profile is defined for models with a single τ²",
        ));
    }
    let reml = fit.spec.method == Method::Reml;
    grid.iter()
        .map(|&t| {
            let m = MarginalCovariance::Diagonal(fit.v.map(|v| v + t));
            let ll = if reml {
                reml_loglik(&fit.y, &fit.design.x, &m)?
            } else {
                ml_loglik(&fit.y, &fit.design.x, &m)?
            };
            Ok((t, ll))
        })
        .collect()
}

/// (residual, standard error) pairs for a residual funnel plot.
pub fn residual_funnel(fit: &UniFit) -> Result<Vec<(f64, f64)>> {
    if fit.p >= fit.k {
        return Err(MetaError::InsufficientData(
            "saturated model has no residual funnel".into(),
        ));
    }
    Ok((0..fit.k)
        .map(|i| (fit.residuals[i], fit.v[i].sqrt()))
        .collect())
}

/// Fit the same model with τ² pinned, used by profile comparisons.
pub fn fit_at_tau2(fit: &UniFit, tau2: f64) -> Result<UniFit> {
    let spec = UniModelSpec {
        fixed_tau2: Some(tau2),
        ..fit.spec.clone()
    };
    fit_uni(&spec, &fit.y, &fit.v, &fit.design)
}
