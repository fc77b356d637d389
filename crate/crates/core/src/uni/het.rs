//! Relative heterogeneity measures and the Q-profile interval for τ².

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::tau2::{check_dims, projection, q_gen};
use crate::dist::chisq_quantile;
use crate::error::Result;
use crate::optim::bisect;

/// (I², H², typical within-study variance) for a random-effects τ².
/// The typical variance is (k − p) / tr(P) with P built from wᵢ = 1/vᵢ, which
/// reduces to (k−1)Σw / ((Σw)² − Σw²) for intercept-only models.
pub fn heterogeneity_stats(
    tau2: f64,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<(f64, f64, f64)> {
    let (k, p) = x.shape();
    let vt = (k - p) as f64 / projection(x, v, 0.0)?.trace();
    Ok((100.0 * tau2 / (vt + tau2), (vt + tau2) / vt, vt))
}

/// I² and H² from QE when no τ² is estimated.
pub(crate) fn fe_heterogeneity(qe: f64, df: usize) -> (f64, f64, f64) {
    let df = df as f64;
    let i2 = if qe > 0.0 {
        (100.0 * (qe - df) / qe).max(0.0)
    } else {
        0.0
    };
    (i2, qe / df, f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tau2Interval {
    pub lb: f64,
    pub ub: f64,
    /// Q(0) already falls below the upper critical value: the interval is {0}.
    pub collapsed: bool,
    /// No crossing found for the upper bound; `ub` is infinite.
    pub open_upper: bool,
}

/// Endpoints solve Q_gen(τ²) = χ²_{k−p} quantiles at (1 ± level)/2.
pub fn ci_tau2_qprofile(
    y: &DVector<f64>,
    v: &DVector<f64>,
    x: &DMatrix<f64>,
    level: f64,
) -> Result<Tau2Interval> {
    check_dims(y, v, x)?;
    let (k, p) = x.shape();
    let df = (k - p) as f64;
    let alpha = 1.0 - level;
    let crit_lb = chisq_quantile(1.0 - alpha / 2.0, df);
    let crit_ub = chisq_quantile(alpha / 2.0, df);
    let q = |t: f64| q_gen(y, x, v, t).unwrap_or(f64::NAN);
    let q0 = q(0.0);
    let solve = |crit: f64| -> Option<f64> {
        if q0 < crit {
            return Some(0.0);
        }
        let mut hi = v.max().max(1e-8);
        let mut n = 0;
        while q(hi) > crit {
            hi *= 2.0;
            n += 1;
            if n > 200 || !hi.is_finite() {
                return None;
            }
        }
        bisect(|t| q(t) - crit, 0.0, hi, 1e-12 * hi.max(1e-12))
    };
    let lb = solve(crit_lb).unwrap_or(f64::INFINITY);
    let ub = solve(crit_ub);
    Ok(Tau2Interval {
        lb,
        ub: ub.unwrap_or(f64::INFINITY),
        collapsed: q0 < crit_ub,
        open_upper: ub.is_none(),
    })
}
