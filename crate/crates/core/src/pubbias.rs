//! Small-study effects: Egger-type regression, Begg's rank correlation,
//! trim-and-fill and fail-safe N.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{norm_quantile, norm_sf};
use crate::error::{MetaError, Result};
use crate::kernel::{check_rank, DesignMatrix, Term};
use crate::uni::{fit_uni, UniFit, UniModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EggerResult {
    /// Coefficient of the standard error.
    pub slope: f64,
    pub se: f64,
    pub stat: f64,
    pub df: Option<f64>,
    pub p: f64,
    /// Limit estimate (effect at se = 0).
    pub intercept: f64,
    pub tau2: f64,
}

fn sei_design(v: &DVector<f64>) -> Result<DesignMatrix> {
    let k = v.len();
    let mut dm = DesignMatrix::intercept_only(k);
    dm.x = DMatrix::from_fn(k, 2, |i, j| if j == 0 { 1.0 } else { v[i].sqrt() });
    dm.encoder.terms = vec![Term::main("sei")];
    dm.encoder
        .vars
        .insert("sei".into(), crate::kernel::VarKind::Continuous);
    dm.encoder.column_names.push("sei".into());
    dm.encoder.term_map.push(("sei".into(), 1..2));
    for (i, row) in dm.rows.iter_mut().enumerate() {
        row.insert("sei".into(), crate::kernel::VarValue::Real(v[i].sqrt()));
    }
    check_rank(&dm)?;
    Ok(dm)
}

/// Meta-regression of yᵢ on seᵢ using the model settings in `spec`.
pub fn egger_regression(
    y: &DVector<f64>,
    v: &DVector<f64>,
    spec: &UniModelSpec,
) -> Result<EggerResult> {
    if y.len() < 3 {
        return Err(MetaError::InsufficientData(
            "the regression test needs k >= 3".into(),
        ));
    }
    let dm = sei_design(v)?;
    let fit = fit_uni(spec, y, v, &dm)?;
    let c = &fit.coefs()[1];
    Ok(EggerResult {
        slope: c.estimate,
        se: c.se,
        stat: c.stat,
        df: c.df,
        p: c.p,
        intercept: fit.b[0],
        tau2: fit.tau2,
    })
}

/// Kendall's S and tau-b between two vectors.
pub fn kendall(x: &[f64], y: &[f64]) -> (f64, f64, bool) {
    let n = x.len();
    let (mut s, mut tx, mut ty) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
            if a == 0 {
                tx += 1;
            }
            if b == 0 {
                ty += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let tau = s as f64 / ((n0 - tx as f64) * (n0 - ty as f64)).sqrt();
    (s as f64, tau, tx > 0 || ty > 0)
}

/// P(|S| ≥ |s|) for Kendall's S without ties, from the distribution of
/// inversion counts of a random permutation.
pub fn kendall_exact_p(n: usize, s: f64) -> f64 {
    let max_inv = n * (n - 1) / 2;
    let mut counts = vec![0f64; max_inv + 1];
    counts[0] = 1.0;
    for m in 2..=n {
        let mut next = vec![0f64; max_inv + 1];
        for (inv, &c) in counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for add in 0..m {
                if inv + add <= max_inv {
                    next[inv + add] += c;
                }
            }
        }
        counts = next;
    }
    let total: f64 = counts.iter().sum();
    let target = s.abs().round() as i64;
    let tail: f64 = counts
        .iter()
        .enumerate()
        .filter(|(inv, _)| (max_inv as i64 - 2 * *inv as i64).abs() >= target)
        .map(|(_, c)| c)
        .sum();
    (tail / total).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeggResult {
    pub s: f64,
    pub tau: f64,
    pub p: f64,
    pub exact: bool,
    pub k_used: usize,
    /// Positions excluded because their deviate variance was not positive.
    pub excluded: Vec<usize>,
}

/// Rank correlation between standardized deviates and sampling variances.
pub fn begg_rank(y: &DVector<f64>, v: &DVector<f64>) -> Result<BeggResult> {
    let k = y.len();
    if k < 3 {
        return Err(MetaError::InsufficientData(
            "the rank correlation test needs k >= 3".into(),
        ));
    }
    let sw: f64 = v.iter().map(|v| 1.0 / v).sum();
    let mu = y.iter().zip(v.iter()).map(|(y, v)| y / v).sum::<f64>() / sw;
    let (mut dev, mut var, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..k {
        let vs = v[i] - 1.0 / sw;
        if vs > 0.0 {
            dev.push((y[i] - mu) / vs.sqrt());
            var.push(v[i]);
        } else {
            excluded.push(i);
        }
    }
    let n = dev.len();
    if n < 3 {
        return Err(MetaError::InsufficientData(
            "fewer than 3 usable deviates".into(),
        ));
    }
    let (s, tau, ties) = kendall(&dev, &var);
    let (p, exact) = if n <= 12 && !ties {
        (kendall_exact_p(n, s), true)
    } else {
        let nn = n as f64;
        let ties_term = |x: &[f64]| -> f64 {
            let mut sorted = x.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let mut acc = 0.0;
            let mut i = 0;
            while i < sorted.len() {
                let mut j = i;
                while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                    j += 1;
                }
                let t = (j - i + 1) as f64;
                acc += t * (t - 1.0) * (2.0 * t + 5.0);
                i = j + 1;
            }
            acc
        };
        let var_s = (nn * (nn - 1.0) * (2.0 * nn + 5.0) - ties_term(&dev) - ties_term(&var)) / 18.0;
        let z = ((s.abs() - 1.0).max(0.0)) / var_s.sqrt();
        ((2.0 * norm_sf(z)).min(1.0), false)
    };
    Ok(BeggResult {
        s,
        tau,
        p,
        exact,
        k_used: n,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Estimator {
    #[default]
    L0,
    R0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Auto,
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct TrimFillResult {
    pub k0: usize,
    /// Side on which studies were imputed.
    pub side: Side,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    /// True for imputed rows (appended after the observed ones).
    pub imputed: Vec<bool>,
    pub adjusted_fit: UniFit,
    pub iterations: usize,
    pub converged: bool,
}

fn fe_mean(y: &[f64], v: &[f64]) -> f64 {
    let sw: f64 = v.iter().map(|v| 1.0 / v).sum();
    y.iter().zip(v).map(|(y, v)| y / v).sum::<f64>() / sw
}

/// Duval-Tweedie trim-and-fill with fixed-effect iterations; the adjusted
/// model is refitted on the augmented data with `spec`.
pub fn trim_and_fill(
    y: &DVector<f64>,
    v: &DVector<f64>,
    estimator: Estimator,
    side: Side,
    max_iter: usize,
    spec: &UniModelSpec,
) -> Result<TrimFillResult> {
    let k = y.len();
    if k < 3 {
        return Err(MetaError::InsufficientData(
            "trim-and-fill needs k >= 3".into(),
        ));
    }
    let side = match side {
        Side::Auto => {
            let e = egger_regression(y, v, spec)?;
            if e.slope > 0.0 {
                Side::Left
            } else {
                Side::Right
            }
        }
        s => s,
    };
    // work with "missing on the left": the excess is on the right and trimmed
    let flip = if side == Side::Right { -1.0 } else { 1.0 };
    let mut order: Vec<usize> = (0..k).collect();
    let ys: Vec<f64> = y.iter().map(|v| v * flip).collect();
    order.sort_by(|&a, &b| ys[a].partial_cmp(&ys[b]).expect("finite").then(a.cmp(&b)));
    let ys_sorted: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let vs_sorted: Vec<f64> = order.iter().map(|&i| v[i]).collect();

    let mut k0 = 0usize;
    let mut converged = false;
    let mut iterations = 0;
    let mut mu = fe_mean(&ys_sorted, &vs_sorted);
    while iterations < max_iter {
        iterations += 1;
        let keep = k - k0;
        mu = fe_mean(&ys_sorted[..keep], &vs_sorted[..keep]);
        let dev: Vec<f64> = ys_sorted.iter().map(|y| y - mu).collect();
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| {
            dev[a]
                .abs()
                .partial_cmp(&dev[b].abs())
                .expect("finite")
                .then(a.cmp(&b))
        });
        let mut signed_rank = vec![0f64; k];
        for (r, &i) in idx.iter().enumerate() {
            signed_rank[i] = dev[i].signum() * (r + 1) as f64;
        }
        let kf = k as f64;
        let est = match estimator {
            Estimator::L0 => {
                let tn: f64 = signed_rank.iter().filter(|r| **r > 0.0).sum();
                (4.0 * tn - kf * (kf + 1.0)) / (2.0 * kf - 1.0)
            }
            Estimator::R0 => {
                let max_neg = signed_rank
                    .iter()
                    .filter(|r| **r < 0.0)
                    .map(|r| -r)
                    .fold(0.0, f64::max);
                kf - max_neg - 1.0
            }
        };
        let next = (est.max(0.0).round() as usize).min(k - 2);
        if next == k0 {
            converged = true;
            break;
        }
        k0 = next;
    }
    let _ = mu;
    let keep = k - k0;
    let mu_trim = fe_mean(&ys_sorted[..keep], &vs_sorted[..keep]);
    let mut y_aug: Vec<f64> = y.iter().copied().collect();
    let mut v_aug: Vec<f64> = v.iter().copied().collect();
    for j in (keep..k).rev() {
        y_aug.push(flip * (2.0 * mu_trim - ys_sorted[j]));
        v_aug.push(vs_sorted[j]);
    }
    let mut imputed = vec![false; k];
    imputed.extend(std::iter::repeat_n(true, k0));
    let y_aug = DVector::from_vec(y_aug);
    let v_aug = DVector::from_vec(v_aug);
    let dm = DesignMatrix::intercept_only(k + k0);
    let adjusted_fit = fit_uni(spec, &y_aug, &v_aug, &dm)?;
    let filled_side = if side == Side::Right {
        Side::Right
    } else {
        Side::Left
    };
    Ok(TrimFillResult {
        k0,
        side: filled_side,
        y: y_aug,
        v: v_aug,
        imputed,
        adjusted_fit,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailSafeMethod {
    Rosenthal,
    Orwin,
    Rosenberg,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailSafe {
    pub method: FailSafeMethod,
    pub n: u64,
    /// Unrounded solution.
    pub real: f64,
    pub target: Option<f64>,
    pub flag: Option<String>,
}

/// Number of additional null studies needed to overturn the result.
pub fn failsafe_n(
    y: &DVector<f64>,
    v: &DVector<f64>,
    method: FailSafeMethod,
    target: Option<f64>,
    alpha: f64,
) -> Result<FailSafe> {
    let k = y.len();
    if k == 0 {
        return Err(MetaError::InsufficientData(
            "fail-safe N needs at least one study".into(),
        ));
    }
    let kf = k as f64;
    let whole = |real: f64| {
        if real < 0.0 {
            0
        } else {
            real.floor() as u64 + 1
        }
    };
    match method {
        FailSafeMethod::Rosenthal => {
            let s: f64 = y.iter().zip(v.iter()).map(|(y, v)| y / v.sqrt()).sum();
            let za = norm_quantile(1.0 - alpha);
            let real = s * s / (za * za) - kf;
            let significant = s.abs() / kf.sqrt() > za;
            Ok(FailSafe {
                method,
                n: if significant { whole(real) } else { 0 },
                real,
                target: None,
                flag: (!significant).then(|| "combined result is not significant".to_string()),
            })
        }
        FailSafeMethod::Orwin => {
            let t = target
                .ok_or_else(|| MetaError::schema("Orwin's fail-safe N needs a target effect"))?;
            if t == 0.0 {
                return Err(MetaError::Domain(
                    "Orwin's target effect must be nonzero".into(),
                ));
            }
            let real = kf * (y.mean() - t) / t;
            // guard against 0.30000000000000004-style noise pushing the ceiling up
            let n = (real - 1e-9 * real.abs().max(1.0)).max(0.0).ceil() as u64;
            Ok(FailSafe {
                method,
                n,
                real,
                target: Some(t),
                flag: None,
            })
        }
        FailSafeMethod::Rosenberg => {
            let w: Vec<f64> = v.iter().map(|v| 1.0 / v).collect();
            let sw: f64 = w.iter().sum();
            let swy: f64 = w.iter().zip(y.iter()).map(|(w, y)| w * y).sum();
            let za = norm_quantile(1.0 - alpha / 2.0);
            let zcomb = swy / sw.sqrt();
            let real = ((swy / za).powi(2) - sw) / (sw / kf);
            let significant = zcomb.abs() > za;
            Ok(FailSafe {
                method,
                n: if significant { whole(real) } else { 0 },
                real,
                target: None,
                flag: (!significant).then(|| "combined result is not significant".to_string()),
            })
        }
    }
}
