//! Mantel-Haenszel and Peto pooling of 2×2 tables.

use serde::{Deserialize, Serialize};

use crate::dist::Reference;
use crate::error::{MetaError, Result};
use crate::escalc::TwoByTwo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MhMeasure {
    #[serde(rename = "RR", alias = "logRR")]
    RR,
    #[serde(rename = "OR", alias = "logOR")]
    OR,
    #[serde(rename = "RD")]
    RD,
}

/// Pooled estimate on the analysis scale (log for RR/OR).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PooledEstimate {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
    pub k_used: usize,
}

fn pooled(estimate: f64, se: f64, level: f64, k_used: usize) -> Result<PooledEstimate> {
    if !estimate.is_finite() || !(se > 0.0) || !se.is_finite() {
        return Err(MetaError::NotEstimable("no informative tables".into()));
    }
    let z = estimate / se;
    let q = Reference::Z.critical(level);
    Ok(PooledEstimate {
        estimate,
        se,
        z,
        p: Reference::Z.two_sided_p(z),
        ci_lb: estimate - q * se,
        ci_ub: estimate + q * se,
        k_used,
    })
}

/// Mantel-Haenszel pooled RR, OR (log scale) or RD. Variances: Greenland-Robins
/// for RR and RD, Robins-Breslow-Greenland for OR. Raw counts, no correction.
pub fn fit_mh(tables: &[TwoByTwo], measure: MhMeasure, level: f64) -> Result<PooledEstimate> {
    if tables.is_empty() {
        return Err(MetaError::NotEstimable("no tables".into()));
    }
    let informative = |t: &TwoByTwo| match measure {
        MhMeasure::RD => t.n1() > 0.0 && t.n2() > 0.0,
        _ => !t.is_double_zero(),
    };
    let used: Vec<&TwoByTwo> = tables.iter().filter(|t| informative(t)).collect();
    if used.is_empty() {
        return Err(MetaError::NotEstimable(
            "all tables are non-informative".into(),
        ));
    }
    let (est, se) = match measure {
        MhMeasure::RR => {
            let (mut r, mut s, mut num) = (0.0, 0.0, 0.0);
            for t in &used {
                let (n1, n2, n) = (t.n1(), t.n2(), t.n());
                r += t.a * n2 / n;
                s += t.c * n1 / n;
                num += (n1 * n2 * (t.a + t.c) - t.a * t.c * n) / (n * n);
            }
            ((r / s).ln(), (num / (r * s)).sqrt())
        }
        MhMeasure::OR => {
            let (mut r, mut s, mut pr, mut ps_qr, mut qs) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for t in &used {
                let n = t.n();
                let (ri, si) = (t.a * t.d / n, t.b * t.c / n);
                let (pi, qi) = ((t.a + t.d) / n, (t.b + t.c) / n);
                r += ri;
                s += si;
                pr += pi * ri;
                ps_qr += pi * si + qi * ri;
                qs += qi * si;
            }
            let var = pr / (2.0 * r * r) + ps_qr / (2.0 * r * s) + qs / (2.0 * s * s);
            ((r / s).ln(), var.sqrt())
        }
        MhMeasure::RD => {
            let (mut num, mut den, mut vnum) = (0.0, 0.0, 0.0);
            for t in &used {
                let (n1, n2, n) = (t.n1(), t.n2(), t.n());
                num += (t.a * n2 - t.c * n1) / n;
                den += n1 * n2 / n;
                vnum += (t.a * t.b * n2.powi(3) + t.c * t.d * n1.powi(3)) / (n1 * n2 * n * n);
            }
            (num / den, (vnum / (den * den)).sqrt())
        }
    };
    pooled(est, se, level, used.len())
}

/// Peto's one-step log odds ratio.
pub fn fit_peto(tables: &[TwoByTwo], level: f64) -> Result<PooledEstimate> {
    let (mut oe, mut var, mut used) = (0.0, 0.0, 0);
    for t in tables {
        let n = t.n();
        let m1 = t.a + t.c;
        let vi = t.n1() * t.n2() * m1 * (t.b + t.d) / (n * n * (n - 1.0));
        if vi > 0.0 && vi.is_finite() {
            oe += t.a - t.n1() * m1 / n;
            var += vi;
            used += 1;
        }
    }
    if used == 0 {
        return Err(MetaError::NotEstimable(
            "all tables are non-informative".into(),
        ));
    }
    pooled(oe / var, 1.0 / var.sqrt(), level, used)
}
