//! Multilevel / multivariate models with nested random effects.

pub mod vmatrix;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{chisq_quantile, chisq_sf, Reference};
use crate::error::{MetaError, Result};
use crate::ingest::{CompleteCaseReport, Dataset};
use crate::kernel::{
    build_design, check_rank, fit_criteria, reml_from_fit, wls_fit, Cholesky, DesignMatrix,
    FitCriteria, MarginalCovariance, Term, WlsFit,
};
use crate::optim::{bfgs, bisect, BfgsOptions};
use crate::postfit::LinearFit;
use crate::table::{Cell, ColumnKind, ResultTable};
use crate::uni::{
    coef_table, linear_estimate, moderator_columns, wald_test, Coef, Estimate, Prediction,
    TestKind, WaldTest,
};

pub use vmatrix::{check_psd_blocks, load_precomputed_v, save_v, vcalc, VMatrix, VcalcSpec};

/// Lower clamp for log variance components.
pub const LOG_SIGMA2_FLOOR: f64 = -30.0;
/// Components below this are reported as exactly zero.
pub const ZERO_SIGMA2: f64 = 1e-10;
const RESTARTS: usize = 5;

/// Outer (`level1`) and inner (`level2`) grouping columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedRandomSpec {
    pub level1: String,
    #[serde(default)]
    pub level2: Option<String>,
}

/// One random intercept: rows sharing a group code share the effect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomComponent {
    pub name: String,
    pub groups: Vec<usize>,
    pub n_levels: usize,
}

impl RandomComponent {
    pub fn from_keys<K: Ord + Clone>(name: &str, keys: &[K]) -> Self {
        let mut codes: BTreeMap<K, usize> = BTreeMap::new();
        for key in keys {
            codes.entry(key.clone()).or_insert(0);
        }
        for (i, v) in codes.values_mut().enumerate() {
            *v = i;
        }
        RandomComponent {
            name: name.to_string(),
            groups: keys.iter().map(|k| codes[k]).collect(),
            n_levels: codes.len(),
        }
    }

    fn indicator(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.groups.len(), self.n_levels);
        for (i, &g) in self.groups.iter().enumerate() {
            z[(i, g)] = 1.0;
        }
        z
    }
}

/// Components for `level1` and `level1/level2`; inner ids are keyed by their
/// outer group so reused ids in different studies stay distinct.
pub fn nested_components(d: &Dataset, spec: &NestedRandomSpec) -> Result<Vec<RandomComponent>> {
    let outer = required_labels(d, &spec.level1)?;
    let mut comps = vec![RandomComponent::from_keys(&spec.level1, &outer)];
    if let Some(l2) = &spec.level2 {
        let inner = required_labels(d, l2)?;
        let keys: Vec<(String, String)> = outer.iter().cloned().zip(inner).collect();
        comps.push(RandomComponent::from_keys(
            &format!("{}/{}", spec.level1, l2),
            &keys,
        ));
    }
    Ok(comps)
}

fn required_labels(d: &Dataset, col: &str) -> Result<Vec<String>> {
    d.labels(col)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| {
                MetaError::Domain(format!("row {}: column '{col}' is missing", d.row_ids()[i]))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvModelSpec {
    pub test: TestKind,
    pub ci_level: f64,
}

impl Default for MvModelSpec {
    fn default() -> Self {
        MvModelSpec {
            test: TestKind::KnappHartung,
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MvFit {
    pub spec: MvModelSpec,
    pub y: DVector<f64>,
    pub v: DMatrix<f64>,
    pub design: DesignMatrix,
    pub components: Vec<RandomComponent>,
    pub sigma2: Vec<f64>,
    /// Components held fixed rather than estimated.
    pub pinned: Vec<bool>,
    /// Estimated components reported as zero.
    pub boundary: Vec<bool>,
    pub k: usize,
    pub p: usize,
    pub b: DVector<f64>,
    pub vb: DMatrix<f64>,
    pub vb_unscaled: DMatrix<f64>,
    pub reference: Reference,
    pub kh_scale: f64,
    /// Marginal covariance V + Σ σ²_c Z_c Z_c'.
    pub m: DMatrix<f64>,
    pub loglik_restricted: f64,
    pub criteria: FitCriteria,
    pub qe: f64,
    pub qe_df: usize,
    pub qe_p: f64,
    pub qm: Option<WaldTest>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub iterations: usize,
    pub trace: Vec<String>,
}

impl MvFit {
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

    pub fn wald(&self, cols: &[usize]) -> Result<WaldTest> {
        wald_test(&self.b, &self.vb, cols, self.reference)
    }

    pub fn term_test(&self, term: &str) -> Result<WaldTest> {
        let r = self
            .design
            .encoder
            .term_range(term)
            .ok_or_else(|| MetaError::schema(format!("term '{term}' is not in the model")))?;
        self.wald(&r.collect::<Vec<_>>())
    }

    pub fn total_sigma2(&self) -> f64 {
        self.sigma2.iter().sum()
    }

    /// Prediction at the column means of X; the PI adds all variance components.
    pub fn prediction(&self, level: f64) -> Prediction {
        let x = &self.design.x;
        let c = DVector::from_iterator(self.p, (0..self.p).map(|j| x.column(j).mean()));
        let pred = c.dot(&self.b);
        let var = (c.transpose() * &self.vb * &c)[(0, 0)].max(0.0);
        let q = self.reference.critical(level);
        let (se, pse) = (var.sqrt(), (var + self.total_sigma2()).sqrt());
        Prediction {
            pred,
            se,
            ci_lb: pred - q * se,
            ci_ub: pred + q * se,
            pi_lb: pred - q * pse,
            pi_ub: pred + q * pse,
        }
    }

    fn problem(&self) -> Problem<'_> {
        Problem {
            y: &self.y,
            x: &self.design.x,
            v: &self.v,
            comps: &self.components,
        }
    }
}

impl LinearFit for MvFit {
    fn coefficients(&self) -> &DVector<f64> {
        &self.b
    }
    fn covariance(&self) -> &DMatrix<f64> {
        &self.vb
    }
    fn design(&self) -> &DesignMatrix {
        &self.design
    }
    fn ci_level(&self) -> f64 {
        self.spec.ci_level
    }
    fn reference_for(&self, _c: &DVector<f64>) -> Reference {
        self.reference
    }
}

struct Problem<'a> {
    y: &'a DVector<f64>,
    x: &'a DMatrix<f64>,
    v: &'a DMatrix<f64>,
    comps: &'a [RandomComponent],
}

impl Problem<'_> {
    fn marginal(&self, s2: &[f64]) -> DMatrix<f64> {
        let mut m = self.v.clone();
        for (c, &s) in self.comps.iter().zip(s2) {
            if s == 0.0 {
                continue;
            }
            let g = &c.groups;
            for i in 0..g.len() {
                for j in 0..g.len() {
                    if g[i] == g[j] {
                        m[(i, j)] += s;
                    }
                }
            }
        }
        m
    }

    fn gls(&self, s2: &[f64]) -> Result<WlsFit> {
        wls_fit(
            self.y,
            self.x,
            &MarginalCovariance::Dense(self.marginal(s2)),
        )
    }

    fn reml(&self, s2: &[f64]) -> f64 {
        self.gls(s2)
            .map(|f| reml_from_fit(&f, self.x))
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn log_upper(&self) -> f64 {
        let vy = self.y.variance() * self.y.len() as f64 / (self.y.len() as f64 - 1.0).max(1.0);
        let vmax = self.v.diagonal().max();
        (100.0 * (vy + vmax)).ln()
    }

    /// Maximize the restricted likelihood over the components not in `pinned`.
    fn optimize(&self, pinned: &[Option<f64>], starts: &[Vec<f64>]) -> Result<Optimum> {
        let free: Vec<usize> = (0..self.comps.len())
            .filter(|&c| pinned[c].is_none())
            .collect();
        let assemble = |theta: &[f64]| -> Vec<f64> {
            let mut s = vec![0.0; self.comps.len()];
            for (c, p) in pinned.iter().enumerate() {
                if let Some(p) = p {
                    s[c] = *p;
                }
            }
            for (t, &c) in theta.iter().zip(&free) {
                s[c] = if *t <= LOG_SIGMA2_FLOOR { 0.0 } else { t.exp() };
            }
            s
        };
        if free.is_empty() {
            let s = assemble(&[]);
            let ll = self.reml(&s);
            if !ll.is_finite() {
                return Err(MetaError::NotPositiveDefinite { pivot: 0 });
            }
            return Ok(Optimum {
                sigma2: s,
                loglik: ll,
                iterations: 0,
                trace: Vec::new(),
            });
        }
        let nf = free.len();
        let mut opts = BfgsOptions::unbounded(nf);
        opts.lower = vec![LOG_SIGMA2_FLOOR; nf];
        opts.upper = vec![self.log_upper(); nf];
        let mut trace = Vec::new();
        let mut best: Option<crate::optim::Minimum> = None;
        for (r, start) in starts.iter().enumerate() {
            let theta0: Vec<f64> = free.iter().map(|&c| start[c].max(1e-12).ln()).collect();
            let m = bfgs(|t: &[f64]| -self.reml(&assemble(t)), &theta0, &opts);
            trace.push(format!(
                "start {r}: -ll = {:.10}, |grad| = {:.3e}, iterations = {}, converged = {}",
                m.value, m.grad_norm, m.iterations, m.converged
            ));
            let better = best.as_ref().is_none_or(|b| {
                m.value < b.value - 1e-10
                    || (!b.converged && m.converged && m.value <= b.value + 1e-8)
            });
            if better {
                best = Some(m);
            }
        }
        let best = best.expect("at least one start");
        let mut s2 = assemble(&best.x);
        let polished = self.fisher_polish(&mut s2, &free);
        if !best.converged && !polished {
            return Err(MetaError::Convergence {
                msg: "variance-component optimizer did not converge".into(),
                trace,
            });
        }
        for &c in &free {
            if s2[c] < ZERO_SIGMA2 {
                s2[c] = 0.0;
            }
        }
        let ll = self.reml(&s2);
        Ok(Optimum {
            sigma2: s2,
            loglik: ll,
            iterations: best.iterations,
            trace,
        })
    }

    /// Fisher scoring on the interior components; true when the score vanishes.
    fn fisher_polish(&self, s2: &mut [f64], free: &[usize]) -> bool {
        let zs: Vec<DMatrix<f64>> = self.comps.iter().map(|c| c.indicator()).collect();
        let mut ll = self.reml(s2);
        for _ in 0..100 {
            let active: Vec<usize> = free
                .iter()
                .copied()
                .filter(|&c| s2[c] > ZERO_SIGMA2)
                .collect();
            let Ok((score, info)) = self.score(s2, &zs) else {
                return false;
            };
            // components stuck at zero must have a nonpositive score
            let boundary_ok = free
                .iter()
                .filter(|c| !active.contains(c))
                .all(|&c| score[c] <= 1e-8 * (1.0 + info[(c, c)].abs()));
            if active.is_empty() {
                return boundary_ok;
            }
            let n = active.len();
            let i_sub = DMatrix::from_fn(n, n, |a, b| info[(active[a], active[b])]);
            let s_sub = DVector::from_iterator(n, active.iter().map(|&c| score[c]));
            let Ok(ch) = Cholesky::new(&i_sub) else {
                return false;
            };
            let step = ch.solve_vec(&s_sub);
            let small = active
                .iter()
                .zip(step.iter())
                .all(|(&c, d)| d.abs() <= 1e-10 * (s2[c] + 1e-8));
            if small {
                return boundary_ok;
            }
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let mut cand = s2.to_vec();
                for (&c, d) in active.iter().zip(step.iter()) {
                    cand[c] = (s2[c] + t * d).max(0.0);
                }
                let lc = self.reml(&cand);
                if lc >= ll {
                    s2.copy_from_slice(&cand);
                    ll = lc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                return boundary_ok
                    && step.amax() < 1e-6 * (1.0 + s2.iter().cloned().fold(0.0, f64::max));
            }
        }
        false
    }

    /// Restricted score and expected information with respect to each σ².
    fn score(&self, s2: &[f64], zs: &[DMatrix<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.marginal(s2);
        let ch = Cholesky::new(&m)?;
        let minv = ch.inverse();
        let mx = &minv * self.x;
        let info_b = Cholesky::new(&(self.x.transpose() * &mx))?;
        let p = &minv - &mx * info_b.solve(&mx.transpose());
        let py = &p * self.y;
        let nc = zs.len();
        let pz: Vec<DMatrix<f64>> = zs.iter().map(|z| (&p * z) * z.transpose()).collect();
        let mut score = DVector::zeros(nc);
        let mut info = DMatrix::zeros(nc, nc);
        for c in 0..nc {
            let zpy = zs[c].transpose() * &py;
            score[c] = 0.5 * zpy.norm_squared() - 0.5 * pz[c].trace();
            for d in 0..=c {
                let t = (&pz[c] * &pz[d]).trace();
                info[(c, d)] = 0.5 * t;
                info[(d, c)] = 0.5 * t;
            }
        }
        Ok((score, info))
    }
}

struct Optimum {
    sigma2: Vec<f64>,
    loglik: f64,
    iterations: usize,
    trace: Vec<String>,
}

fn default_starts(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    nc: usize,
) -> Result<Vec<Vec<f64>>> {
    let vd = v.diagonal();
    let t = crate::uni::estimate_tau2(crate::uni::Method::Dl, y, &vd, x)?.tau2;
    let base = (t / nc.max(1) as f64).max(0.01 * vd.mean());
    const OFFSETS: [f64; 4] = [1.0, -1.0, 2.0, -2.0];
    Ok((0..RESTARTS)
        .map(|r| {
            (0..nc)
                .map(|c| {
                    if r == 0 {
                        base
                    } else {
                        let o = OFFSETS[(r - 1) % OFFSETS.len()];
                        base * (if c % 2 == 0 { o } else { -o }).exp()
                    }
                })
                .collect()
        })
        .collect())
}

/// REML fit of y = Xb + Σ Z_c u_c + e with Var(e) = V.
pub fn fit_mv(
    spec: &MvModelSpec,
    y: &DVector<f64>,
    design: &DesignMatrix,
    v: &DMatrix<f64>,
    components: &[RandomComponent],
) -> Result<MvFit> {
    fit_mv_pinned(
        spec,
        y,
        design,
        v,
        components,
        &vec![None; components.len()],
    )
}

/// As [`fit_mv`] with some components held at fixed values.
pub fn fit_mv_pinned(
    spec: &MvModelSpec,
    y: &DVector<f64>,
    design: &DesignMatrix,
    v: &DMatrix<f64>,
    components: &[RandomComponent],
    pinned: &[Option<f64>],
) -> Result<MvFit> {
    if !(spec.ci_level > 0.0 && spec.ci_level < 1.0) {
        return Err(MetaError::schema("ci_level must lie in (0, 1)"));
    }
    let x = &design.x;
    let (k, p) = x.shape();
    if y.len() != k
        || v.shape() != (k, k)
        || components.iter().any(|c| c.groups.len() != k)
        || pinned.len() != components.len()
    {
        return Err(MetaError::schema(
            "dimension mismatch between y, X, V and the random effects",
        ));
    }
    if k <= p {
        return Err(MetaError::InsufficientData(format!(
            "multilevel model needs k > p (k = {k}, p = {p})"
        )));
    }
    if let Some(pv) = pinned.iter().flatten().find(|s| !(**s >= 0.0)) {
        return Err(MetaError::schema(format!(
            "fixed variance component {pv} must be nonnegative"
        )));
    }
    check_rank(design)?;
    Cholesky::new(v).map_err(|_| MetaError::PsdViolation {
        cluster: "V".into(),
        min_eigen: f64::NAN,
    })?;
    let prob = Problem {
        y,
        x,
        v,
        comps: components,
    };
    let starts = default_starts(y, x, v, components.len())?;
    let opt = prob.optimize(pinned, &starts)?;
    finish(spec, &prob, design, components, pinned, opt)
}

fn finish(
    spec: &MvModelSpec,
    prob: &Problem,
    design: &DesignMatrix,
    components: &[RandomComponent],
    pinned: &[Option<f64>],
    opt: Optimum,
) -> Result<MvFit> {
    let x = prob.x;
    let (k, p) = x.shape();
    let m = prob.marginal(&opt.sigma2);
    let g = wls_fit(prob.y, x, &MarginalCovariance::Dense(m.clone()))?;
    let df = (k - p) as f64;
    let (reference, kh_scale) = match spec.test {
        TestKind::WaldZ => (Reference::Z, 1.0),
        TestKind::KnappHartung => (Reference::T(df), g.rss_weighted / df),
    };
    let vb = &g.cov_b * kh_scale;
    let qe = wls_fit(prob.y, x, &MarginalCovariance::Dense(prob.v.clone()))?.rss_weighted;
    let mods = moderator_columns(design);
    let qm = if mods.is_empty() {
        None
    } else {
        Some(wald_test(&g.b, &vb, &mods, reference)?)
    };
    let ll = reml_from_fit(&g, x);
    let n_free = pinned.iter().filter(|p| p.is_none()).count();
    Ok(MvFit {
        spec: *spec,
        y: prob.y.clone(),
        v: prob.v.clone(),
        design: design.clone(),
        components: components.to_vec(),
        boundary: opt
            .sigma2
            .iter()
            .zip(pinned)
            .map(|(s, p)| p.is_none() && *s == 0.0)
            .collect(),
        sigma2: opt.sigma2,
        pinned: pinned.iter().map(|p| p.is_some()).collect(),
        k,
        p,
        b: g.b.clone(),
        vb,
        vb_unscaled: g.cov_b.clone(),
        reference,
        kh_scale,
        m,
        loglik_restricted: ll,
        criteria: fit_criteria(ll, -2.0 * ll, p + n_free, k - p),
        qe,
        qe_df: k - p,
        qe_p: chisq_sf(qe, df),
        qm,
        fitted: g.fitted,
        residuals: g.residuals,
        iterations: opt.iterations,
        trace: opt.trace,
    })
}

/// Likelihood-ratio test for dropping one or more components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InclusionTest {
    pub label: String,
    pub dropped: Vec<usize>,
    pub df: usize,
    pub loglik_reduced: Option<f64>,
    pub lrt: Option<f64>,
    pub p: Option<f64>,
    pub note: Option<String>,
}

/// Drop each estimated component in turn (and all of them jointly when there
/// are several), refitting the rest by REML with the same X and V.
pub fn inclusion_tests(full: &MvFit) -> Vec<InclusionTest> {
    let free: Vec<usize> = (0..full.components.len())
        .filter(|&c| !full.pinned[c])
        .collect();
    let mut sets: Vec<Vec<usize>> = free.iter().map(|&c| vec![c]).collect();
    if free.len() > 1 {
        sets.push(free.clone());
    }
    let prob = full.problem();
    sets.into_iter()
        .map(|drop| {
            let label = drop
                .iter()
                .map(|&c| full.components[c].name.as_str())
                .collect::<Vec<_>>()
                .join(" + ");
            let pinned: Vec<Option<f64>> = (0..full.components.len())
                .map(|c| {
                    if drop.contains(&c) {
                        Some(0.0)
                    } else if full.pinned[c] {
                        Some(full.sigma2[c])
                    } else {
                        None
                    }
                })
                .collect();
            let starts: Vec<Vec<f64>> = {
                let mut s = vec![full
                    .sigma2
                    .iter()
                    .map(|v| v.max(1e-4 * full.v.diagonal().mean()))
                    .collect::<Vec<_>>()];
                if let Ok(more) =
                    default_starts(&full.y, &full.design.x, &full.v, full.components.len())
                {
                    s.extend(more);
                }
                s
            };
            match prob.optimize(&pinned, &starts) {
                Ok(o) => {
                    let raw = 2.0 * (full.loglik_restricted - o.loglik);
                    let lrt = if raw < 0.0 && raw >= -1e-6 { 0.0 } else { raw };
                    InclusionTest {
                        label,
                        df: drop.len(),
                        loglik_reduced: Some(o.loglik),
                        lrt: Some(lrt),
                        p: Some(chisq_sf(lrt.max(0.0), drop.len() as f64)),
                        note: (raw < -1e-6)
                            .then(|| "reduced model fits better than the full model".to_string()),
                        dropped: drop,
                    }
                }
                Err(e) => InclusionTest {
                    label,
                    df: drop.len(),
                    loglik_reduced: None,
                    lrt: None,
                    p: None,
                    note: Some(format!("unavailable: {e}")),
                    dropped: drop,
                },
            }
        })
        .collect()
}

pub fn inclusion_table(tests: &[InclusionTest]) -> ResultTable {
    let mut t = ResultTable::new("inclusion_tests", "Level Inclusion Tests")
        .column("component", "Dropped", ColumnKind::Text)
        .column("df", "df", ColumnKind::Integer)
        .column("loglik_reduced", "Log lik. (reduced)", ColumnKind::Number)
        .column("lrt", "LRT", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue);
    for r in tests {
        t.push_row(vec![
            Cell::from(r.label.as_str()),
            Cell::from(r.df),
            Cell::from(r.loglik_reduced),
            Cell::from(r.lrt),
            Cell::from(r.p),
        ]);
    }
    t.footnote("Likelihood-ratio tests on the restricted likelihood; p-values use the naive chi-square reference without a boundary correction.");
    for r in tests.iter().filter(|r| r.note.is_some()) {
        t.footnote(format!(
            "{}: {}",
            r.label,
            r.note.as_deref().unwrap_or_default()
        ));
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaInterval {
    pub component: String,
    pub estimate: f64,
    pub lb: f64,
    pub ub: f64,
    pub level: f64,
    /// No crossing found below the search limit; `ub` is that limit.
    pub open_upper: bool,
}

/// Profile-likelihood interval for one variance component, re-optimizing the
/// others at every evaluation.
pub fn ci_sigma_profile(fit: &MvFit, component: usize, level: f64) -> Result<SigmaInterval> {
    if component >= fit.components.len() {
        return Err(MetaError::schema(format!(
            "no variance component {component}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetaError::schema("level must lie in (0, 1)"));
    }
    let prob = fit.problem();
    let target = fit.loglik_restricted - 0.5 * chisq_quantile(level, 1.0);
    let est = fit.sigma2[component];
    let base_start: Vec<f64> = fit
        .sigma2
        .iter()
        .map(|v| v.max(1e-4 * fit.v.diagonal().mean()))
        .collect();
    let profile = |s: f64| -> f64 {
        let pinned: Vec<Option<f64>> = (0..fit.components.len())
            .map(|c| {
                if c == component {
                    Some(s)
                } else if fit.pinned[c] {
                    Some(fit.sigma2[c])
                } else {
                    None
                }
            })
            .collect();
        match prob.optimize(&pinned, std::slice::from_ref(&base_start)) {
            Ok(o) => o.loglik - target,
            Err(_) => f64::NAN,
        }
    };
    let lb = if est == 0.0 || profile(0.0) >= 0.0 {
        0.0
    } else {
        bisect(profile, 0.0, est, 1e-10 * est).unwrap_or(0.0)
    };
    let scale = fit.v.diagonal().mean();
    let mut lo = est;
    let mut hi = (2.0 * est).max(0.01 * scale);
    let mut open_upper = true;
    for _ in 0..60 {
        let g = profile(hi);
        if g < 0.0 {
            open_upper = false;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    let ub = if open_upper {
        hi
    } else {
        bisect(profile, lo, hi, 1e-10 * hi).unwrap_or(hi)
    };
    Ok(SigmaInterval {
        component: fit.components[component].name.clone(),
        estimate: est,
        lb,
        ub,
        level,
        open_upper,
    })
}

/// Profile intervals for every estimated component, spread over up to
/// `threads` worker threads.
pub fn ci_sigma_profiles(fit: &MvFit, level: f64, threads: usize) -> Vec<Result<SigmaInterval>> {
    let comps: Vec<usize> = (0..fit.components.len())
        .filter(|&c| !fit.pinned[c])
        .collect();
    let threads = threads.max(1).min(comps.len().max(1));
    if threads == 1 {
        return comps
            .iter()
            .map(|&c| ci_sigma_profile(fit, c, level))
            .collect();
    }
    let mut out: Vec<Option<Result<SigmaInterval>>> = (0..comps.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = out
            .chunks_mut(comps.len().div_ceil(threads))
            .zip(comps.chunks(comps.len().div_ceil(threads)))
            .collect();
        for (slot, cs) in chunks {
            s.spawn(move || {
                for (o, &c) in slot.iter_mut().zip(cs) {
                    *o = Some(ci_sigma_profile(fit, c, level));
                }
            });
        }
    });
    out.into_iter()
        .map(|o| o.expect("filled by worker"))
        .collect()
}

/// Where V comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum VSource {
    Diagonal,
    Vcalc(VcalcSpec),
    /// Bound to the rows of the dataset before list-wise deletion.
    Precomputed(VMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvColumns {
    pub yi: String,
    pub vi: String,
    pub terms: Vec<Term>,
    pub intercept: bool,
    pub random: NestedRandomSpec,
}

#[derive(Debug, Clone)]
pub struct MvData {
    pub y: DVector<f64>,
    pub v: VMatrix,
    pub design: DesignMatrix,
    pub components: Vec<RandomComponent>,
    pub data: Dataset,
    pub complete: CompleteCaseReport,
}

/// List-wise deletion, V construction and random-effect coding.
pub fn prepare_mv(d: &Dataset, cols: &MvColumns, source: &VSource) -> Result<MvData> {
    let mut required: Vec<&str> = vec![&cols.yi, &cols.vi, &cols.random.level1];
    if let Some(l2) = &cols.random.level2 {
        required.push(l2);
    }
    if let VSource::Vcalc(s) = source {
        required.push(&s.cluster);
        required.extend(s.construct.as_deref());
        required.extend(s.construct_type.as_deref());
    }
    for t in &cols.terms {
        required.extend(t.vars.iter().map(|s| s.as_str()));
    }
    let mut seen = Vec::new();
    required.retain(|c| {
        if seen.contains(c) {
            false
        } else {
            seen.push(*c);
            true
        }
    });
    let complete = d.complete_cases(&required)?;
    let data = d.select_row_ids(&complete.kept_row_ids);
    let y = DVector::from_iterator(
        data.nrows(),
        data.real(&cols.yi)?.iter().map(|v| v.expect("complete")),
    );
    let vi: Vec<f64> = data
        .real(&cols.vi)?
        .iter()
        .map(|v| v.expect("complete"))
        .collect();
    let v = match source {
        VSource::Diagonal => {
            if let Some(i) = vi.iter().position(|x| !(*x > 0.0)) {
                return Err(MetaError::Domain(format!(
                    "row {}: sampling variance must be positive",
                    data.row_ids()[i]
                )));
            }
            VMatrix::diagonal(&vi, data.row_ids())
        }
        VSource::Vcalc(s) => vcalc(s, &data, &cols.vi)?,
        VSource::Precomputed(m) => m.select_row_ids(data.row_ids())?,
    };
    let design = build_design(&data, &cols.terms, cols.intercept)?;
    let components = nested_components(&data, &cols.random)?;
    Ok(MvData {
        y,
        v,
        design,
        components,
        data,
        complete,
    })
}
