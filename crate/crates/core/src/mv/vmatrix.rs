//! Sampling variance-covariance matrices for dependent effect sizes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};
use crate::ingest::Dataset;

/// Min eigenvalue must be at least `-PSD_TOL * max eigenvalue`.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VcalcSpec {
    pub cluster: String,
    /// Observation identity within a cluster. Accepted for completeness; the
    /// correlation only depends on the construct type.
    #[serde(default)]
    pub construct: Option<String>,
    #[serde(default)]
    pub construct_type: Option<String>,
    pub rho_within_type: f64,
    #[serde(default)]
    pub rho_between_type: f64,
}

impl VcalcSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("rho_within_type", self.rho_within_type),
            ("rho_between_type", self.rho_between_type),
        ] {
            if !(r.abs() <= 1.0) {
                return Err(MetaError::schema(format!(
                    "{name} must lie in [-1, 1], got {r}"
                )));
            }
        }
        if self.construct_type.is_some() && self.construct.is_none() {
            return Err(MetaError::schema("construct_type requires construct"));
        }
        Ok(())
    }
}

/// A k×k sampling covariance matrix whose rows follow `row_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct VMatrix {
    pub v: DMatrix<f64>,
    pub row_ids: Vec<usize>,
}

impl VMatrix {
    pub fn diagonal(vi: &[f64], row_ids: &[usize]) -> Self {
        VMatrix {
            v: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(vi)),
            row_ids: row_ids.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    /// Sub-matrix for the given row ids, in that order.
    pub fn select_row_ids(&self, ids: &[usize]) -> Result<VMatrix> {
        let pos: BTreeMap<usize, usize> = self
            .row_ids
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, i))
            .collect();
        let idx = ids
            .iter()
            .map(|r| {
                pos.get(r)
                    .copied()
                    .ok_or_else(|| MetaError::Format(format!("row {r} has no entry in V")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = idx.len();
        Ok(VMatrix {
            v: DMatrix::from_fn(n, n, |i, j| self.v[(idx[i], idx[j])]),
            row_ids: ids.to_vec(),
        })
    }
}

/// Build V from the cluster structure: zero across clusters, `rho·sqrt(vi vj)`
/// within, with the rho chosen by whether the construct types agree.
pub fn vcalc(spec: &VcalcSpec, d: &Dataset, vi: &str) -> Result<VMatrix> {
    spec.validate()?;
    let k = d.nrows();
    let v = d
        .real(vi)?
        .iter()
        .enumerate()
        .map(|(i, x)| match x {
            Some(x) if *x > 0.0 && x.is_finite() => Ok(*x),
            _ => Err(MetaError::Domain(format!(
                "row {}: sampling variance must be positive",
                d.row_ids()[i]
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let clusters = complete_labels(d, &spec.cluster)?;
    if let Some(c) = &spec.construct {
        complete_labels(d, c)?;
    }
    let types = match &spec.construct_type {
        Some(c) => Some(complete_labels(d, c)?),
        None => None,
    };
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        m[(i, i)] = v[i];
        for j in 0..i {
            if clusters[i] != clusters[j] {
                continue;
            }
            let r = match &types {
                Some(t) if t[i] != t[j] => spec.rho_between_type,
                _ => spec.rho_within_type,
            };
            let c = r * (v[i] * v[j]).sqrt();
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    check_psd_blocks(&m, &clusters)?;
    Ok(VMatrix {
        v: m,
        row_ids: d.row_ids().to_vec(),
    })
}

fn complete_labels(d: &Dataset, col: &str) -> Result<Vec<String>> {
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

/// Eigenvalue check of every cluster block.
pub fn check_psd_blocks(v: &DMatrix<f64>, clusters: &[String]) -> Result<()> {
    let mut blocks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        blocks.entry(c).or_default().push(i);
    }
    for (name, idx) in blocks {
        let n = idx.len();
        let b = DMatrix::from_fn(n, n, |i, j| v[(idx[i], idx[j])]);
        if let Some(min) = psd_violation(&b) {
            return Err(MetaError::PsdViolation {
                cluster: name.to_string(),
                min_eigen: min,
            });
        }
    }
    Ok(())
}

/// Smallest eigenvalue when it breaks the tolerance.
fn psd_violation(b: &DMatrix<f64>) -> Option<f64> {
    let e = SymmetricEigen::new(b.clone()).eigenvalues;
    let max = e.iter().cloned().fold(0.0_f64, f64::max);
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    (min < -PSD_TOL * max).then_some(min)
}

/// Write V as headerless CSV with 17 significant digits per entry.
pub fn save_v(v: &VMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..v.dim() {
        let row: Vec<String> = (0..v.dim())
            .map(|j| format!("{:.16e}", v.v[(i, j)]))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read a V file written by [`save_v`] (or by hand) and bind it to the rows of `d`.
pub fn load_precomputed_v(path: impl AsRef<Path>, d: &Dataset) -> Result<VMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                let x: f64 = t.trim().parse().map_err(|_| {
                    MetaError::Format(format!("line {}: '{}' is not a number", n + 1, t.trim()))
                })?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(MetaError::Format(format!(
                        "line {}: non-finite entry",
                        n + 1
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let k = d.nrows();
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        let cols = rows.first().map_or(0, |r| r.len());
        return Err(MetaError::Format(format!(
            "V is {}x{cols} but the dataset has {k} rows",
            rows.len()
        )));
    }
    let m = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
    for i in 0..k {
        if !(m[(i, i)] > 0.0) {
            return Err(MetaError::Format(format!(
                "diagonal entry {} is not positive",
                i + 1
            )));
        }
        for j in 0..i {
            let scale = m[(i, j)].abs().max(m[(j, i)].abs()).max(1.0);
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(MetaError::Format(format!(
                    "V is not symmetric at ({}, {})",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    // pairwise Cauchy-Schwarz first so the message names the offending rows
    for i in 0..k {
        for j in 0..i {
            let bound = (m[(i, i)] * m[(j, j)]).sqrt();
            if m[(i, j)].abs() > bound * (1.0 + PSD_TOL) {
                let b =
                    DMatrix::from_row_slice(2, 2, &[m[(i, i)], m[(i, j)], m[(j, i)], m[(j, j)]]);
                let min = psd_violation(&b).unwrap_or(f64::NAN);
                return Err(MetaError::PsdViolation {
                    cluster: format!("rows {} and {}", d.row_ids()[j], d.row_ids()[i]),
                    min_eigen: min,
                });
            }
        }
    }
    if let Some(min) = psd_violation(&m) {
        return Err(MetaError::PsdViolation {
            cluster: "precomputed matrix".into(),
            min_eigen: min,
        });
    }
    Ok(VMatrix {
        v: m,
        row_ids: d.row_ids().to_vec(),
    })
}
