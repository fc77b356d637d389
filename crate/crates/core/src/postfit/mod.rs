//! Post-fit summaries: marginal means, contrasts, predictions and casewise
//! diagnostics.

pub mod diagnostics;
pub mod emm;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dist::Reference;
use crate::error::Result;
use crate::kernel::{DesignMatrix, RowValues};
use crate::uni::{linear_estimate, predict_row, Estimate, Prediction, UniFit};

pub use diagnostics::{
    baujat, casewise_diagnostics, profile_tau2, residual_funnel, BaujatPoint, CaseDiagnostics,
};
pub use emm::{
    contrasts, emm, emm_continuous, emm_scale, reference_vector, reference_vector_at, Adjustment,
    ContrastRow, EmmRow, Weighting,
};

/// Anything with coefficients, a covariance and a design that linear
/// combinations can be formed against.
pub trait LinearFit {
    fn coefficients(&self) -> &DVector<f64>;
    fn covariance(&self) -> &DMatrix<f64>;
    fn design(&self) -> &DesignMatrix;
    fn ci_level(&self) -> f64;
    /// Reference distribution for the combination `c`.
    fn reference_for(&self, c: &DVector<f64>) -> Reference;

    fn estimate(&self, c: &DVector<f64>, null: f64) -> Estimate {
        linear_estimate(
            self.coefficients(),
            self.covariance(),
            c,
            null,
            self.reference_for(c),
            self.ci_level(),
        )
    }
}

impl LinearFit for UniFit {
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

/// A point on the prediction scale together with the design row used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedEffect {
    #[serde(flatten)]
    pub prediction: Prediction,
    pub tau2: f64,
}

/// Predictions with CI and PI for arbitrary moderator rows. For location-scale
/// models the PI uses the row's fitted τ² = exp(z'α).
pub fn predict_effects(
    fit: &UniFit,
    rows: &[RowValues],
    level: f64,
) -> Result<Vec<PredictedEffect>> {
    rows.iter()
        .map(|r| {
            let x = DVector::from_vec(fit.design.encoder.encode(r)?);
            let tau2 = match &fit.scale {
                Some(s) => DVector::from_vec(s.design.encoder.encode(r)?)
                    .dot(&s.alpha)
                    .exp(),
                None => fit.tau2,
            };
            Ok(PredictedEffect {
                prediction: predict_row(fit, &x, tau2, level),
                tau2,
            })
        })
        .collect()
}

/// Predictions at the observed rows.
pub fn fitted_predictions(fit: &UniFit, level: f64) -> Vec<PredictedEffect> {
    let tau2 = fit.tau2_rows();
    (0..fit.k)
        .map(|i| {
            let x = fit.design.x.row(i).transpose();
            PredictedEffect {
                prediction: predict_row(fit, &x, tau2[i], level),
                tau2: tau2[i],
            }
        })
        .collect()
}
