//! Location-scale models: τ²ᵢ = exp(zᵢ'α).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{
    fit_given_tau2, heterogeneity_stats, linear_estimate, wald_test, Coef, Estimate, Method,
    UniFit, UniModelSpec, WaldTest,
};
use crate::dist::Reference;
use crate::error::{MetaError, Result};
use crate::kernel::{
    check_rank, fit_criteria, ml_loglik, reml_loglik, Cholesky, DesignMatrix, MarginalCovariance,
};
use crate::optim::{bfgs, numeric_gradient, numeric_hessian, BfgsOptions};

const RESTARTS: usize = 5;
const ALPHA_BOUND: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct ScaleFit {
    pub design: DesignMatrix,
    pub alpha: DVector<f64>,
    pub cov_alpha: DMatrix<f64>,
    pub tau2_i: DVector<f64>,
    pub ci_level: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleSummary {
    pub coefs: Vec<Coef>,
    pub omnibus: Option<WaldTest>,
}

impl ScaleFit {
    pub fn reference(&self) -> Reference {
        Reference::Z
    }

    pub fn coefs(&self) -> Vec<Coef> {
        let crit = Reference::Z.critical(self.ci_level);
        (0..self.alpha.len())
            .map(|j| {
                let se = self.cov_alpha[(j, j)].max(0.0).sqrt();
                let stat = self.alpha[j] / se;
                Coef {
                    name: self.design.encoder.column_names[j].clone(),
                    estimate: self.alpha[j],
                    se,
                    stat,
                    df: None,
                    p: Reference::Z.two_sided_p(stat),
                    ci_lb: self.alpha[j] - crit * se,
                    ci_ub: self.alpha[j] + crit * se,
                }
            })
            .collect()
    }

    pub fn linear_combination(&self, c: &DVector<f64>, null: f64) -> Estimate {
        linear_estimate(
            &self.alpha,
            &self.cov_alpha,
            c,
            null,
            Reference::Z,
            self.ci_level,
        )
    }

    pub fn wald(&self, cols: &[usize]) -> Result<WaldTest> {
        wald_test(&self.alpha, &self.cov_alpha, cols, Reference::Z)
    }

    pub fn term_test(&self, term: &str) -> Result<WaldTest> {
        let r =
            self.design.encoder.term_range(term).ok_or_else(|| {
                MetaError::schema(format!("scale term '{term}' is not in the model"))
            })?;
        self.wald(&r.collect::<Vec<_>>())
    }

    /// Test of all non-intercept scale coefficients.
    pub fn omnibus(&self) -> Option<WaldTest> {
        let cols = super::moderator_columns(&self.design);
        (!cols.is_empty()).then(|| self.wald(&cols).ok()).flatten()
    }
}

/// Jointly fit the location part (GLS given α) and the log-linear scale part
/// by maximizing the (restricted) likelihood over α.
pub fn fit_location_scale(
    spec: &UniModelSpec,
    y: &DVector<f64>,
    v: &DVector<f64>,
    design: &DesignMatrix,
    z: &DesignMatrix,
) -> Result<UniFit> {
    spec.validate()?;
    if !matches!(spec.method, Method::Reml | Method::Ml) || spec.fixed_tau2.is_some() {
        return Err(MetaError::schema(
            "location-scale models require method REML or ML",
        ));
    }
    check_rank(z)?;
    let (k, p) = design.x.shape();
    let q = z.p();
    if k <= p + q {
        return Err(MetaError::InsufficientData(format!(
            "location-scale model needs k > p + q (k = {k}, p + q = {})",
            p + q
        )));
    }
    super::tau2::check_dims(y, v, &design.x)?;
    let reml = spec.method == Method::Reml;
    let zx = z.x.clone();
    let negll = |a: &[f64]| -> f64 {
        let t = &zx * DVector::from_column_slice(a);
        let m = MarginalCovariance::Diagonal(DVector::from_iterator(
            k,
            (0..k).map(|i| v[i] + t[i].exp()),
        ));
        let ll = if reml {
            reml_loglik(y, &design.x, &m)
        } else {
            ml_loglik(y, &design.x, &m)
        };
        ll.map(|l| -l).unwrap_or(f64::INFINITY)
    };

    // start: constant log τ² from the homogeneous-heterogeneity fit
    let t0 = super::estimate_tau2(spec.method, y, v, &design.x)?.tau2;
    let level = (t0.max(0.01 * v.mean())).ln();
    let zt = zx.transpose();
    let a0 = Cholesky::new(&(&zt * &zx))?.solve_vec(&(&zt * DVector::from_element(k, level)));

    let mut opts = BfgsOptions::unbounded(q);
    opts.lower = vec![-ALPHA_BOUND; q];
    opts.upper = vec![ALPHA_BOUND; q];
    let mut trace = Vec::new();
    let mut best: Option<crate::optim::Minimum> = None;
    for r in 0..RESTARTS {
        let start: Vec<f64> = a0
            .iter()
            .enumerate()
            .map(|(j, a)| a + if r == 0 { 0.0 } else { perturbation(r, j) })
            .collect();
        let m = bfgs(negll, &start, &opts);
        trace.push(format!(
            "start {r}: -ll = {:.10}, |grad| = {:.3e}, iterations = {}, converged = {}",
            m.value, m.grad_norm, m.iterations, m.converged
        ));
        let better = best
            .as_ref()
            .is_none_or(|b| m.value < b.value - 1e-10 || (!b.converged && m.converged));
        if better {
            best = Some(m);
        }
    }
    let mut best = best.expect("at least one start");
    if !best.converged {
        return Err(MetaError::Convergence {
            msg: "location-scale optimizer did not converge".into(),
            trace,
        });
    }
    // Newton polish on the numeric Hessian
    let mut mf = negll;
    for _ in 0..10 {
        let g = numeric_gradient(&mut mf, &best.x, &opts.lower, &opts.upper);
        let h = numeric_hessian(&mut mf, &best.x);
        let Ok(ch) = Cholesky::new(&h) else { break };
        let step = ch.solve_vec(&DVector::from_column_slice(&g));
        let cand: Vec<f64> = best
            .x
            .iter()
            .zip(step.iter())
            .map(|(a, s)| (a - s).clamp(-ALPHA_BOUND, ALPHA_BOUND))
            .collect();
        let fc = mf(&cand);
        if !(fc <= best.value) {
            break;
        }
        let done = step.amax() < 1e-12;
        best.x = cand;
        best.value = fc;
        if done {
            break;
        }
    }
    let hess = numeric_hessian(&mut mf, &best.x);
    let cov_alpha = Cholesky::new(&hess)
        .map(|c| c.inverse())
        .unwrap_or_else(|_| DMatrix::from_element(q, q, f64::NAN));
    let alpha = DVector::from_column_slice(&best.x);
    let tau2_i = (&zx * &alpha).map(f64::exp);
    let mut fit = fit_given_tau2(spec, y, v, design, &tau2_i, true)?;
    let parms = p + q;
    let sat: f64 = v
        .iter()
        .map(|vi| (2.0 * std::f64::consts::PI * vi).ln())
        .sum();
    fit.fit_ml = fit_criteria(fit.loglik_ml, -2.0 * fit.loglik_ml - sat, parms, k);
    fit.fit_reml = Some(fit_criteria(
        fit.loglik_reml,
        -2.0 * fit.loglik_reml,
        parms,
        k - p,
    ));
    if q == 1 && z.encoder.intercept {
        let (i2, h2, vt) = heterogeneity_stats(tau2_i[0], v, &design.x)?;
        fit.tau2 = tau2_i[0];
        fit.i2 = i2;
        fit.h2 = h2;
        fit.vt = vt;
    }
    fit.scale = Some(ScaleFit {
        design: z.clone(),
        alpha,
        cov_alpha,
        tau2_i,
        ci_level: spec.ci_level,
        iterations: best.iterations,
    });
    Ok(fit)
}

/// Deterministic restart offsets on the log scale.
fn perturbation(restart: usize, j: usize) -> f64 {
    const OFFSETS: [f64; 4] = [1.0, -1.0, 2.0, -2.0];
    let base = OFFSETS[(restart - 1) % OFFSETS.len()];
    if j == 0 {
        base
    } else {
        0.25 * base * if j % 2 == 0 { 1.0 } else { -1.0 }
    }
}
