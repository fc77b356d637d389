//! Cluster-robust (sandwich) covariance with small-sample corrections and
//! Satterthwaite degrees of freedom.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dist::Reference;
use crate::error::{MetaError, Result};
use crate::kernel::{Cholesky, DesignMatrix};
use crate::mv::MvFit;
use crate::postfit::LinearFit;
use crate::table::{Cell, ColumnKind, ResultTable};
use crate::uni::{linear_estimate, Coef, Estimate, UniFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RobustKind {
    CR0,
    CR1,
    #[default]
    CR2,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustOptions {
    #[serde(rename = "type")]
    pub kind: RobustKind,
    /// Fall back to a pseudo-inverse square root when an adjustment block is singular.
    pub allow_pseudo_inverse: bool,
}

/// What the sandwich needs from a fitted model.
pub trait WorkingModel: LinearFit {
    fn response(&self) -> &DVector<f64>;
    /// Model-implied marginal covariance of the effects.
    fn working_covariance(&self) -> DMatrix<f64>;
}

impl WorkingModel for UniFit {
    fn response(&self) -> &DVector<f64> {
        &self.y
    }
    fn working_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&(&self.v + self.tau2_rows()))
    }
}

impl WorkingModel for MvFit {
    fn response(&self) -> &DVector<f64> {
        &self.y
    }
    fn working_covariance(&self) -> DMatrix<f64> {
        self.m.clone()
    }
}

#[derive(Debug, Clone)]
pub struct RobustFit {
    pub kind: RobustKind,
    pub b: DVector<f64>,
    pub names: Vec<String>,
    pub cov_robust: DMatrix<f64>,
    /// Satterthwaite df for each coefficient.
    pub df: Vec<f64>,
    pub n_clusters: usize,
    pub cluster_names: Vec<String>,
    pub ci_level: f64,
    /// Per cluster, the p × k map from y to the cluster's score contribution.
    q: Vec<DMatrix<f64>>,
    phi: DMatrix<f64>,
}

impl RobustFit {
    /// Satterthwaite df of the robust variance of c'b.
    pub fn df_for(&self, c: &DVector<f64>) -> f64 {
        let rows: Vec<DVector<f64>> = self.q.iter().map(|q| q.transpose() * c).collect();
        let prod: Vec<DVector<f64>> = rows.iter().map(|r| &self.phi * r).collect();
        let mut e = 0.0;
        let mut var = 0.0;
        for i in 0..rows.len() {
            e += rows[i].dot(&prod[i]);
            for j in 0..rows.len() {
                let cij = rows[i].dot(&prod[j]);
                var += cij * cij;
            }
        }
        e * e / var
    }

    pub fn estimate(&self, c: &DVector<f64>, null: f64) -> Estimate {
        linear_estimate(
            &self.b,
            &self.cov_robust,
            c,
            null,
            Reference::T(self.df_for(c)),
            self.ci_level,
        )
    }
}

/// Rows belonging to each cluster, clusters in sorted order.
fn cluster_rows(clusters: &[String]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        m.entry(c.as_str()).or_default().push(i);
    }
    m
}

fn sub(m: &DMatrix<f64>, r: &[usize], c: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(r.len(), c.len(), |i, j| m[(r[i], c[j])])
}

fn rows_of(m: &DMatrix<f64>, r: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(r.len(), m.ncols(), |i, j| m[(r[i], j)])
}

/// Symmetric inverse square root by eigen-decomposition. Eigenvalues below
/// `1e-12 * scale` count as zero.
fn inv_sqrt(g: &DMatrix<f64>, scale: f64, cluster: &str, pseudo: bool) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(g.clone());
    let max = e.eigenvalues.amax().max(scale);
    let mut d = DVector::zeros(g.nrows());
    for (i, &l) in e.eigenvalues.iter().enumerate() {
        if l > 1e-12 * max {
            d[i] = 1.0 / l.sqrt();
        } else if !pseudo {
            return Err(MetaError::Cr2Adjustment(cluster.to_string()));
        }
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose())
}

/// Sandwich covariance with working weights W_j = M_jj⁻¹ and adjustment
/// matrices A_j chosen by `opts.kind`.
pub fn cluster_robust<F: WorkingModel + ?Sized>(
    fit: &F,
    clusters: &[String],
    opts: RobustOptions,
) -> Result<RobustFit> {
    let x = &fit.design().x;
    let (k, p) = x.shape();
    let y = fit.response();
    if clusters.len() != k {
        return Err(MetaError::schema(format!(
            "{} cluster labels for {k} rows",
            clusters.len()
        )));
    }
    let groups = cluster_rows(clusters);
    let g = groups.len();
    if g < 2 {
        return Err(MetaError::InsufficientClusters(g));
    }
    let phi = fit.working_covariance();
    let b = fit.coefficients().clone();
    let e = y - x * &b;

    let mut w_blocks = Vec::with_capacity(g);
    let mut info = DMatrix::zeros(p, p);
    for idx in groups.values() {
        let mj = sub(&phi, idx, idx);
        let wj = Cholesky::new(&mj)?.inverse();
        let xj = rows_of(x, idx);
        info += xj.transpose() * &wj * &xj;
        w_blocks.push(wj);
    }
    let bread = Cholesky::new(&info)?.inverse();

    // I − H with H = X B X' W, W block-diagonal by cluster
    let mut wx = DMatrix::zeros(k, p);
    for (idx, wj) in groups.values().zip(&w_blocks) {
        let block = wj * rows_of(x, idx);
        for (a, &r) in idx.iter().enumerate() {
            wx.set_row(r, &block.row(a));
        }
    }
    let ih = DMatrix::identity(k, k) - x * &bread * wx.transpose();
    // B (Σ X_j'W_j Φ_j W_j X_j) B, needed when Φ differs from W⁻¹ across clusters
    let mut uwtwu = DMatrix::zeros(p, p);
    for (idx, wj) in groups.values().zip(&w_blocks) {
        let xw = rows_of(x, idx).transpose() * wj;
        uwtwu += &xw * sub(&phi, idx, idx) * xw.transpose();
    }
    let mwm = &bread * uwtwu * &bread;

    let mut meat = DMatrix::zeros(p, p);
    let mut q = Vec::with_capacity(g);
    for ((name, idx), wj) in groups.iter().zip(&w_blocks) {
        let nj = idx.len();
        let xj = rows_of(x, idx);
        let a = match opts.kind {
            RobustKind::CR0 => DMatrix::identity(nj, nj),
            RobustKind::CR1 => DMatrix::identity(nj, nj) * (g as f64 / (g as f64 - 1.0)).sqrt(),
            RobustKind::CR2 => {
                let theta = sub(&phi, idx, idx);
                let r = Cholesky::new(&theta)?.l().transpose();
                let hjj = &xj * &bread * xj.transpose() * wj;
                let inner =
                    &theta - &hjj * &theta - &theta * hjj.transpose() + &xj * &mwm * xj.transpose();
                let mut gm = &r * inner * r.transpose();
                crate::kernel::symmetrize(&mut gm);
                let scale = SymmetricEigen::new(&r * &theta * r.transpose())
                    .eigenvalues
                    .amax();
                r.transpose() * inv_sqrt(&gm, scale, name, opts.allow_pseudo_inverse)? * &r
            }
        };
        let ej = DVector::from_iterator(nj, idx.iter().map(|&i| e[i]));
        let lin = &bread * xj.transpose() * wj * &a;
        let u = &lin * ej;
        meat += &u * u.transpose();
        q.push(lin * rows_of(&ih, idx));
    }
    let mut cov = meat;
    crate::kernel::symmetrize(&mut cov);
    let mut rf = RobustFit {
        kind: opts.kind,
        b,
        names: fit.design().encoder.column_names.clone(),
        cov_robust: cov,
        df: Vec::new(),
        n_clusters: g,
        cluster_names: groups.keys().map(|s| s.to_string()).collect(),
        ci_level: fit.ci_level(),
        q,
        phi,
    };
    rf.df = (0..p)
        .map(|j| {
            let mut c = DVector::zeros(p);
            c[j] = 1.0;
            rf.df_for(&c)
        })
        .collect();
    Ok(rf)
}

/// t tests of each coefficient against its null with the robust covariance
/// and per-coefficient Satterthwaite df.
pub fn robust_coef_tests(rf: &RobustFit, nulls: Option<&[f64]>) -> Vec<Coef> {
    let p = rf.b.len();
    (0..p)
        .map(|j| {
            let null = nulls.map_or(0.0, |n| n[j]);
            let reference = Reference::T(rf.df[j]);
            let se = rf.cov_robust[(j, j)].max(0.0).sqrt();
            let stat = (rf.b[j] - null) / se;
            let crit = reference.critical(rf.ci_level);
            Coef {
                name: rf.names[j].clone(),
                estimate: rf.b[j],
                se,
                stat,
                df: Some(rf.df[j]),
                p: reference.two_sided_p(stat),
                ci_lb: rf.b[j] - crit * se,
                ci_ub: rf.b[j] + crit * se,
            }
        })
        .collect()
}

pub fn robust_table(rf: &RobustFit, coefs: &[Coef]) -> ResultTable {
    let mut t = ResultTable::new("robust_coefficients", "Cluster-Robust Coefficient Tests")
        .column("term", "", ColumnKind::Text)
        .column("estimate", "Estimate", ColumnKind::Number)
        .column("se", "Robust SE", ColumnKind::Number)
        .column("t", "t", ColumnKind::Number)
        .column("df", "df", ColumnKind::Number)
        .column("p", "p", ColumnKind::Pvalue)
        .column("ci_lb", "Lower", ColumnKind::Number)
        .column("ci_ub", "Upper", ColumnKind::Number);
    for c in coefs {
        t.push_row(vec![
            Cell::from(c.name.as_str()),
            c.estimate.into(),
            c.se.into(),
            c.stat.into(),
            Cell::from(c.df),
            c.p.into(),
            c.ci_lb.into(),
            c.ci_ub.into(),
        ]);
    }
    t.footnote(format!(
        "{:?} cluster-robust standard errors over {} clusters with Satterthwaite degrees of freedom.",
        rf.kind, rf.n_clusters
    ));
    t
}

/// A fit whose covariance and reference distribution are replaced by the
/// robust ones, for marginal means and contrasts.
pub struct RobustLinearFit<'a> {
    pub fit: &'a dyn LinearFit,
    pub robust: &'a RobustFit,
}

impl LinearFit for RobustLinearFit<'_> {
    fn coefficients(&self) -> &DVector<f64> {
        &self.robust.b
    }
    fn covariance(&self) -> &DMatrix<f64> {
        &self.robust.cov_robust
    }
    fn design(&self) -> &DesignMatrix {
        self.fit.design()
    }
    fn ci_level(&self) -> f64 {
        self.robust.ci_level
    }
    fn reference_for(&self, c: &DVector<f64>) -> Reference {
        Reference::T(self.robust.df_for(c))
    }
}
