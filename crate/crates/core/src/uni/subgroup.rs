//! Stratified fits with a between-group Wald test.

use serde::Serialize;

use super::{fit_dataset, UniColumns, UniFit, UniModelSpec};
use crate::dist::chisq_sf;
use crate::error::Result;
use crate::ingest::Dataset;

#[derive(Debug, Clone)]
pub struct GroupFit {
    pub level: String,
    pub k: usize,
    /// `None` when the group could not be fitted (see `note`).
    pub fit: Option<UniFit>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetweenTest {
    pub q: f64,
    pub df: usize,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct SubgroupResult {
    pub groups: Vec<GroupFit>,
    pub between: Option<BetweenTest>,
    pub warnings: Vec<String>,
}

/// Q_between on the first coefficient of groups fitted separately.
pub fn between_groups(estimates: &[(f64, f64)]) -> Option<BetweenTest> {
    if estimates.len() < 2 {
        return None;
    }
    let w: Vec<f64> = estimates.iter().map(|(_, se)| 1.0 / (se * se)).collect();
    let sw: f64 = w.iter().sum();
    let mu = estimates
        .iter()
        .zip(&w)
        .map(|((m, _), w)| w * m)
        .sum::<f64>()
        / sw;
    let q: f64 = estimates
        .iter()
        .zip(&w)
        .map(|((m, _), w)| w * (m - mu).powi(2))
        .sum();
    let df = estimates.len() - 1;
    Some(BetweenTest {
        q,
        df,
        p: chisq_sf(q, df as f64),
    })
}

/// Fit the model separately within each level of `grouping` (each group gets
/// its own τ²) and test equality of the group estimates.
pub fn subgroup_analysis(
    spec: &UniModelSpec,
    d: &Dataset,
    cols: &UniColumns,
    grouping: &str,
) -> Result<SubgroupResult> {
    let mut required = cols.required();
    required.push(grouping);
    let complete = d.complete_cases(&required)?;
    let data = d.select_row_ids(&complete.kept_row_ids);
    let labels = data.labels(grouping)?;
    let mut levels: Vec<String> = labels.iter().flatten().cloned().collect();
    levels.sort();
    levels.dedup();
    let mut groups = Vec::new();
    let mut warnings = Vec::new();
    let mut estimates = Vec::new();
    for level in levels {
        let sub = data.apply_subset(grouping, std::slice::from_ref(&level))?;
        let k = sub.nrows();
        match fit_dataset(spec, &sub, cols) {
            Ok((fit, _)) => {
                estimates.push((fit.b[0], fit.vb[(0, 0)].sqrt()));
                groups.push(GroupFit {
                    level,
                    k,
                    fit: Some(fit),
                    note: None,
                });
            }
            Err(e) => {
                warnings.push(format!(
                    "group '{level}' excluded from the between-group test: {e}"
                ));
                groups.push(GroupFit {
                    level,
                    k,
                    fit: None,
                    note: Some(e.to_string()),
                });
            }
        }
    }
    Ok(SubgroupResult {
        groups,
        between: between_groups(&estimates),
        warnings,
    })
}
