//! Design matrices, Cholesky-based generalized least squares, Q statistics and
//! (restricted) log-likelihoods shared by every fitting routine.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{MetaError, Result};
use crate::ingest::{Column, Dataset};

/// A model term: a single variable or an interaction of several.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Term {
    pub vars: Vec<String>,
}

impl Term {
    pub fn main(var: &str) -> Self {
        Term {
            vars: vec![var.to_string()],
        }
    }

    /// Parse `a` or `a:b` (also accepts `a*b` as the bare interaction).
    pub fn parse(s: &str) -> Result<Self> {
        let vars: Vec<String> = s.split([':', '*']).map(|v| v.trim().to_string()).collect();
        if vars.iter().any(String::is_empty) {
            return Err(MetaError::schema(format!("malformed term '{s}'")));
        }
        Ok(Term { vars })
    }

    pub fn name(&self) -> String {
        self.vars.join(":")
    }

    pub fn is_interaction(&self) -> bool {
        self.vars.len() > 1
    }
}

/// How a variable enters the design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum VarKind {
    Continuous,
    /// Observed levels in code-point order; the first is the reference.
    Categorical {
        levels: Vec<String>,
    },
}

/// The value of one variable for one (possibly synthetic) row.
#[derive(Debug, Clone, PartialEq)]
pub enum VarValue {
    Real(f64),
    Level(String),
    /// A probability mixture over levels; used for averaged reference grids.
    Mixture(Vec<(String, f64)>),
}

pub type RowValues = BTreeMap<String, VarValue>;

/// Maps variable values to design rows. Kept separate from the matrix so that
/// reference grids and prediction rows share the exact coding of the fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignEncoder {
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub vars: BTreeMap<String, VarKind>,
    pub column_names: Vec<String>,
    pub term_map: Vec<(String, Range<usize>)>,
}

impl DesignEncoder {
    pub fn ncols(&self) -> usize {
        self.column_names.len()
    }

    pub fn term_range(&self, term: &str) -> Option<Range<usize>> {
        self.term_map
            .iter()
            .find(|(n, _)| n == term)
            .map(|(_, r)| r.clone())
    }

    /// Reference level per categorical variable.
    pub fn coding(&self) -> BTreeMap<String, String> {
        self.vars
            .iter()
            .filter_map(|(n, k)| match k {
                VarKind::Categorical { levels } => levels.first().map(|l| (n.clone(), l.clone())),
                VarKind::Continuous => None,
            })
            .collect()
    }

    fn block(&self, var: &str, value: &VarValue) -> Result<Vec<f64>> {
        let kind = self
            .vars
            .get(var)
            .ok_or_else(|| MetaError::schema(format!("unknown variable '{var}'")))?;
        match (kind, value) {
            (VarKind::Continuous, VarValue::Real(x)) => Ok(vec![*x]),
            (VarKind::Categorical { levels }, VarValue::Level(l)) => {
                let pos = levels.iter().position(|x| x == l).ok_or_else(|| {
                    MetaError::schema(format!(
                        "level '{l}' of '{var}' not present in the fitted data"
                    ))
                })?;
                let mut v = vec![0.0; levels.len() - 1];
                if pos > 0 {
                    v[pos - 1] = 1.0;
                }
                Ok(v)
            }
            (VarKind::Categorical { levels }, VarValue::Mixture(ws)) => {
                let mut v = vec![0.0; levels.len() - 1];
                for (l, w) in ws {
                    let pos = levels.iter().position(|x| x == l).ok_or_else(|| {
                        MetaError::schema(format!(
                            "level '{l}' of '{var}' not present in the fitted data"
                        ))
                    })?;
                    if pos > 0 {
                        v[pos - 1] += w;
                    }
                }
                Ok(v)
            }
            _ => Err(MetaError::schema(format!(
                "value of '{var}' does not match its type"
            ))),
        }
    }

    /// Encode one row. Interaction columns are products of parent columns.
    pub fn encode(&self, values: &RowValues) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.ncols());
        if self.intercept {
            row.push(1.0);
        }
        for term in &self.terms {
            let mut acc = vec![1.0];
            for var in &term.vars {
                let value = values
                    .get(var)
                    .ok_or_else(|| MetaError::schema(format!("missing value for '{var}'")))?;
                let b = self.block(var, value)?;
                acc = acc
                    .iter()
                    .flat_map(|a| b.iter().map(move |x| a * x))
                    .collect();
            }
            row.extend(acc);
        }
        Ok(row)
    }
}

/// Design matrix plus the variable values it was built from.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub encoder: DesignEncoder,
    pub x: DMatrix<f64>,
    pub rows: Vec<RowValues>,
}

impl DesignMatrix {
    pub fn k(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn intercept_only(k: usize) -> Self {
        let encoder = DesignEncoder {
            intercept: true,
            terms: Vec::new(),
            vars: BTreeMap::new(),
            column_names: vec!["intercept".into()],
            term_map: vec![("intercept".into(), 0..1)],
        };
        DesignMatrix {
            encoder,
            x: DMatrix::from_element(k, 1, 1.0),
            rows: vec![RowValues::new(); k],
        }
    }

    /// Rows selected by position, keeping the encoder.
    pub fn select(&self, positions: &[usize]) -> DesignMatrix {
        let x = DMatrix::from_fn(positions.len(), self.p(), |i, j| self.x[(positions[i], j)]);
        DesignMatrix {
            encoder: self.encoder.clone(),
            x,
            rows: positions.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

fn read_values(d: &Dataset, var: &str) -> Result<(VarKind, Vec<VarValue>)> {
    let col = d.column(var)?;
    let missing = || {
        MetaError::schema(format!(
            "column '{var}' has missing values in the analysed rows"
        ))
    };
    match col {
        Column::Real(v) => {
            let vals = v
                .iter()
                .map(|x| x.map(VarValue::Real).ok_or_else(missing))
                .collect::<Result<_>>()?;
            Ok((VarKind::Continuous, vals))
        }
        _ => {
            let labels = d.labels(var)?;
            let vals: Vec<VarValue> = labels
                .into_iter()
                .map(|l| l.map(VarValue::Level).ok_or_else(missing))
                .collect::<Result<_>>()?;
            let mut levels: Vec<String> = vals
                .iter()
                .filter_map(|v| match v {
                    VarValue::Level(l) => Some(l.clone()),
                    _ => None,
                })
                .collect();
            levels.sort();
            levels.dedup();
            Ok((VarKind::Categorical { levels }, vals))
        }
    }
}

/// Build X for `terms` over all rows of `d` (which must be complete for them).
/// Categorical variables get treatment coding against their first observed level.
pub fn build_design(d: &Dataset, terms: &[Term], intercept: bool) -> Result<DesignMatrix> {
    let k = d.nrows();
    let mut vars = BTreeMap::new();
    let mut rows = vec![RowValues::new(); k];
    for term in terms {
        for var in &term.vars {
            if vars.contains_key(var) {
                continue;
            }
            let (kind, vals) = read_values(d, var)?;
            for (row, v) in rows.iter_mut().zip(vals) {
                row.insert(var.clone(), v);
            }
            vars.insert(var.clone(), kind);
        }
    }
    let mut column_names = Vec::new();
    let mut term_map = Vec::new();
    if intercept {
        column_names.push("intercept".to_string());
        term_map.push(("intercept".to_string(), 0..1));
    }
    for term in terms {
        let start = column_names.len();
        let mut names = vec![String::new()];
        for var in &term.vars {
            let parts: Vec<String> = match &vars[var] {
                VarKind::Continuous => vec![var.clone()],
                VarKind::Categorical { levels } => levels
                    .iter()
                    .skip(1)
                    .map(|l| format!("{var}[{l}]"))
                    .collect(),
            };
            names = names
                .iter()
                .flat_map(|n| {
                    parts.iter().map(move |p| {
                        if n.is_empty() {
                            p.clone()
                        } else {
                            format!("{n}:{p}")
                        }
                    })
                })
                .collect();
        }
        column_names.extend(names);
        term_map.push((term.name(), start..column_names.len()));
    }
    let encoder = DesignEncoder {
        intercept,
        terms: terms.to_vec(),
        vars,
        column_names,
        term_map,
    };
    let p = encoder.ncols();
    let mut x = DMatrix::zeros(k, p);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in encoder.encode(r)?.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let dm = DesignMatrix { encoder, x, rows };
    check_rank(&dm)?;
    Ok(dm)
}

fn term_of_column(enc: &DesignEncoder, j: usize) -> String {
    enc.term_map
        .iter()
        .find(|(_, r)| r.contains(&j))
        .map(|(n, _)| n.clone())
        .unwrap_or_default()
}

/// Full column rank check by modified Gram-Schmidt; on failure names the
/// dependent column's term together with the terms it is a combination of.
pub fn check_rank(dm: &DesignMatrix) -> Result<()> {
    let (k, p) = dm.x.shape();
    if p == 0 {
        return Ok(());
    }
    if k < p {
        return Err(MetaError::SingularDesign {
            terms: dm.encoder.term_map.iter().map(|(n, _)| n.clone()).collect(),
        });
    }
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut basis_cols: Vec<usize> = Vec::new();
    for j in 0..p {
        let col = dm.x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col.clone();
        for qi in &q {
            let c = qi.dot(&v);
            v -= qi * c;
        }
        if norm0 == 0.0 || v.norm() <= 1e-10 * norm0.max(1.0) {
            let mut terms = vec![term_of_column(&dm.encoder, j)];
            if norm0 > 0.0 && !basis_cols.is_empty() {
                let sub = DMatrix::from_fn(k, basis_cols.len(), |i, c| dm.x[(i, basis_cols[c])]);
                let coef = sub
                    .svd(true, true)
                    .solve(&col, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(basis_cols.len()));
                for (c, &bj) in basis_cols.iter().enumerate() {
                    let t = term_of_column(&dm.encoder, bj);
                    if coef[c].abs() > 1e-8 && !terms.contains(&t) {
                        terms.push(t);
                    }
                }
            }
            return Err(MetaError::SingularDesign { terms });
        }
        q.push(&v / v.norm());
        basis_cols.push(j);
    }
    Ok(())
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factor a symmetric matrix; a non-positive pivot yields
    /// [`MetaError::NotPositiveDefinite`] with its (0-based) index.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut s = a[(j, j)];
            for c in 0..j {
                s -= l[(j, c)] * l[(j, c)];
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(MetaError::NotPositiveDefinite { pivot: j });
            }
            let d = s.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for c in 0..j {
                    s -= l[(i, c)] * l[(j, c)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve `L z = b` in place (forward substitution), column-wise.
    pub fn forward(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut z = b.clone();
        for c in 0..z.ncols() {
            for i in 0..n {
                let mut s = z[(i, c)];
                for j in 0..i {
                    s -= self.l[(i, j)] * z[(j, c)];
                }
                z[(i, c)] = s / self.l[(i, i)];
            }
        }
        z
    }

    fn backward(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut x = z.clone();
        for c in 0..x.ncols() {
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for j in (i + 1)..n {
                    s -= self.l[(j, i)] * x[(j, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.backward(&self.forward(b))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.solve(&DMatrix::identity(self.l.nrows(), self.l.nrows()));
        symmetrize(&mut inv);
        inv
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Marginal covariance of the observed effects.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalCovariance {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl MarginalCovariance {
    pub fn dim(&self) -> usize {
        match self {
            MarginalCovariance::Diagonal(d) => d.len(),
            MarginalCovariance::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            MarginalCovariance::Diagonal(d) => DMatrix::from_diagonal(d),
            MarginalCovariance::Dense(m) => m.clone(),
        }
    }

    fn factor(&self) -> Result<Factor> {
        match self {
            MarginalCovariance::Diagonal(d) => {
                if let Some(pivot) = d.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(MetaError::NotPositiveDefinite { pivot });
                }
                Ok(Factor::Diag(d.clone()))
            }
            MarginalCovariance::Dense(m) => Ok(Factor::Chol(Cholesky::new(m)?)),
        }
    }
}

enum Factor {
    Diag(DVector<f64>),
    Chol(Cholesky),
}

impl Factor {
    /// `L⁻¹ A` where M = L L'.
    fn whiten(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Factor::Diag(d) => {
                DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / d[i].sqrt())
            }
            Factor::Chol(c) => c.forward(a),
        }
    }

    fn ln_det(&self) -> f64 {
        match self {
            Factor::Diag(d) => d.iter().map(|v| v.ln()).sum(),
            Factor::Chol(c) => c.ln_det(),
        }
    }

    fn solve(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Factor::Diag(d) => DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / d[i]),
            Factor::Chol(c) => c.solve(a),
        }
    }
}

/// Result of a generalized least-squares fit.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub b: DVector<f64>,
    pub cov_b: DMatrix<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    /// r' M⁻¹ r.
    pub rss_weighted: f64,
    pub ln_det_m: f64,
    /// ln |X' M⁻¹ X|.
    pub ln_det_info: f64,
    /// M⁻¹ X (k × p); the hat matrix is X cov_b (M⁻¹X)'.
    pub minv_x: DMatrix<f64>,
}

impl WlsFit {
    pub fn hat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.cov_b * self.minv_x.transpose()
    }
}

/// b = (X'M⁻¹X)⁻¹X'M⁻¹y via a Cholesky factor of M (never an explicit inverse).
pub fn wls_fit(y: &DVector<f64>, x: &DMatrix<f64>, m: &MarginalCovariance) -> Result<WlsFit> {
    let k = y.len();
    if x.nrows() != k || m.dim() != k {
        return Err(MetaError::schema("dimension mismatch between y, X and M"));
    }
    let f = m.factor()?;
    let xw = f.whiten(x);
    let yw = f.whiten(&DMatrix::from_column_slice(k, 1, y.as_slice()));
    let info = xw.transpose() * &xw;
    let info_chol = Cholesky::new(&info).map_err(|_| MetaError::SingularDesign {
        terms: vec!["<weighted design>".into()],
    })?;
    let xty = xw.transpose() * &yw;
    let b = DVector::from_column_slice(info_chol.solve(&xty).as_slice());
    let cov_b = info_chol.inverse();
    let fitted = x * &b;
    let residuals = y - &fitted;
    let rw = f.whiten(&DMatrix::from_column_slice(k, 1, residuals.as_slice()));
    let minv_x = f.solve(x);
    Ok(WlsFit {
        b,
        cov_b,
        fitted,
        residuals,
        rss_weighted: rw.iter().map(|v| v * v).sum(),
        ln_det_m: f.ln_det(),
        ln_det_info: info_chol.ln_det(),
        minv_x,
    })
}

/// Weighted residual sum of squares Σ wᵢ (yᵢ − xᵢ'b_W)².
pub fn q_statistic(y: &DVector<f64>, x: &DMatrix<f64>, w: &DVector<f64>) -> Result<f64> {
    let v = w.map(|wi| 1.0 / wi);
    Ok(wls_fit(y, x, &MarginalCovariance::Diagonal(v))?.rss_weighted)
}

/// −½ [k ln 2π + ln|M| + r'M⁻¹r] at the GLS solution.
pub fn ml_loglik(y: &DVector<f64>, x: &DMatrix<f64>, m: &MarginalCovariance) -> Result<f64> {
    let f = wls_fit(y, x, m)?;
    Ok(ml_from_fit(&f, y.len()))
}

pub(crate) fn ml_from_fit(f: &WlsFit, k: usize) -> f64 {
    -0.5 * (k as f64 * (2.0 * PI).ln() + f.ln_det_m + f.rss_weighted)
}

/// Restricted log-likelihood:
/// −½ [(k−p) ln 2π + ln|M| + r'M⁻¹r + ln|X'M⁻¹X|] + ½ ln|X'X|.
/// The last term makes the value invariant to reparameterizations of X.
pub fn reml_loglik(y: &DVector<f64>, x: &DMatrix<f64>, m: &MarginalCovariance) -> Result<f64> {
    let (k, p) = x.shape();
    if k <= p {
        return Err(MetaError::InsufficientData(format!(
            "restricted likelihood needs k > p (k = {k}, p = {p})"
        )));
    }
    let f = wls_fit(y, x, m)?;
    Ok(reml_from_fit(&f, x))
}

pub(crate) fn reml_from_fit(f: &WlsFit, x: &DMatrix<f64>) -> f64 {
    let (k, p) = x.shape();
    let xtx = x.transpose() * x;
    let ln_xtx = Cholesky::new(&xtx).map(|c| c.ln_det()).unwrap_or(0.0);
    -0.5 * ((k - p) as f64 * (2.0 * PI).ln() + f.ln_det_m + f.rss_weighted + f.ln_det_info)
        + 0.5 * ln_xtx
}

/// Likelihood-based fit statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitCriteria {
    pub loglik: f64,
    pub deviance: f64,
    pub aic: f64,
    pub bic: f64,
    pub aicc: f64,
}

/// AIC/BIC/AICc with `n_params` free parameters and `n_eff` effective
/// observations (k for ML, k − p for REML).
pub fn fit_criteria(loglik: f64, deviance: f64, n_params: usize, n_eff: usize) -> FitCriteria {
    let q = n_params as f64;
    let n = (n_eff as f64).max(q + 2.0);
    FitCriteria {
        loglik,
        deviance,
        aic: -2.0 * loglik + 2.0 * q,
        bic: -2.0 * loglik + q * (n_eff as f64).ln(),
        aicc: -2.0 * loglik + 2.0 * q * n / (n - q - 1.0),
    }
}
