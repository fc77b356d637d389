//! Randomized invariants, one test per property.

mod props;

use metakit::kernel::DesignMatrix;
use metakit::robust::{cluster_robust, RobustOptions};
use metakit::uni::{fit_uni, Method, UniModelSpec};
use nalgebra::DVector;

#[test]
fn shift_equivariance() {
    props::shift_equivariance(props::CASES).unwrap();
}

#[test]
fn scale_equivariance() {
    props::scale_equivariance(props::CASES).unwrap();
}

#[test]
fn gls_residuals_are_orthogonal() {
    props::gls_residuals_are_orthogonal(props::CASES).unwrap();
}

#[test]
fn prediction_interval_contains_ci() {
    props::prediction_interval_contains_ci(props::CASES).unwrap();
}

#[test]
fn egger_is_antisymmetric() {
    props::egger_is_antisymmetric(props::CASES).unwrap();
}

#[test]
fn rosenthal_grows_with_effect_size() {
    props::rosenthal_grows_with_effect_size(props::CASES).unwrap();
}

#[test]
fn cr1_is_rescaled_cr0() {
    props::cr1_is_rescaled_cr0(props::CASES).unwrap();
}

#[test]
fn balanced_cr2_df_is_g_minus_1() {
    props::balanced_cr2_df_is_g_minus_1(props::CASES).unwrap();
}

#[test]
fn vcalc_is_block_diagonal_and_psd() {
    props::vcalc_is_block_diagonal_and_psd(props::CASES).unwrap();
}

#[test]
fn vcalc_never_returns_an_indefinite_matrix() {
    props::vcalc_never_returns_an_indefinite_matrix(props::CASES).unwrap();
}

#[test]
fn emm_and_contrasts_agree() {
    props::emm_and_contrasts_agree(props::CASES).unwrap();
}

#[test]
fn svg_is_deterministic_with_one_marker_per_study() {
    props::svg_is_deterministic_with_one_marker_per_study(props::CASES).unwrap();
}

#[test]
fn multilevel_fit_ignores_row_order() {
    props::multilevel_fit_ignores_row_order(props::CASES).unwrap();
}

/// Identical clusters with unequal variances inside each cluster do not give
/// exactly G - 1; value from an independent numpy evaluation of the CR2
/// Satterthwaite formula.
#[test]
fn cr2_df_with_unequal_within_cluster_variances() {
    let cl: Vec<String> = ["a", "a", "b", "b", "c", "c"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let v = [0.01, 0.16795269624281825].repeat(3);
    let spec = UniModelSpec {
        method: Method::Fe,
        ..Default::default()
    };
    let f = fit_uni(
        &spec,
        &DVector::zeros(6),
        &DVector::from_vec(v),
        &DesignMatrix::intercept_only(6),
    )
    .unwrap();
    let rf = cluster_robust(&f, &cl, RobustOptions::default()).unwrap();
    assert!((rf.df[0] - 2.0019489198557596).abs() < 1e-9, "{}", rf.df[0]);
}
