#![allow(dead_code)]

//! Randomized invariants shared by the property tests and the acceptance
//! run. Each check takes its case count; callers use at least 200.

use std::collections::HashMap;

use metakit::ingest::Dataset;
use metakit::kernel::{build_design, DesignMatrix, Term};
use metakit::mv::{
    fit_mv, prepare_mv, vcalc, MvColumns, MvModelSpec, NestedRandomSpec, VSource, VcalcSpec,
};
use metakit::plots::{
    bubble_svg, forest_svg, funnel_svg, BubbleOptions, ForestOptions, FunnelInput, FunnelOptions,
    PlotSpec,
};
use metakit::postfit::{contrasts, emm, Adjustment, Weighting};
use metakit::pubbias::{egger_regression, failsafe_n, FailSafeMethod};
use metakit::robust::{cluster_robust, RobustKind, RobustOptions};
use metakit::uni::{fit_uni, prediction_interval, Method, TestKind, UniFit, UniModelSpec};
use metakit::MetaError;
use nalgebra::{DMatrix, DVector};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};

pub const CASES: u32 = 256;

const METHODS: [Method; 6] = [
    Method::Reml,
    Method::Ml,
    Method::Dl,
    Method::Pm,
    Method::He,
    Method::Fe,
];

fn run<S: Strategy>(
    cases: u32,
    s: S,
    f: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let cfg = ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    TestRunner::new(cfg).run(&s, f).map_err(|e| e.to_string())
}

/// Effects, sampling variances and one moderator.
fn study_set(kmin: usize, kmax: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (kmin..kmax).prop_flat_map(|k| {
        (
            vec(-2.0..2.0f64, k),
            vec(0.01..1.0f64, k),
            vec(-1.0..1.0f64, k),
        )
    })
}

fn design(x: Option<&[f64]>, k: usize) -> DesignMatrix {
    let mut dm = DesignMatrix::intercept_only(k);
    if let Some(x) = x {
        dm.x = DMatrix::from_fn(k, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        dm.encoder.column_names = vec!["intercept".into(), "x".into()];
    }
    dm
}

fn fit(method: Method, y: &[f64], v: &[f64], dm: &DesignMatrix) -> Result<UniFit, MetaError> {
    let spec = UniModelSpec {
        method,
        ..Default::default()
    };
    fit_uni(
        &spec,
        &DVector::from_column_slice(y),
        &DVector::from_column_slice(v),
        dm,
    )
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn shift_equivariance(cases: u32) -> Result<(), String> {
    run(
        cases,
        (study_set(5, 25), -3.0..3.0f64, any::<bool>()),
        |((y, v, x), c, with_mod)| {
            let k = y.len();
            let dm = design(with_mod.then_some(&x[..]), k);
            let ys: Vec<f64> = y.iter().map(|t| t + c).collect();
            for m in METHODS {
                let (a, b) = (fit(m, &y, &v, &dm).unwrap(), fit(m, &ys, &v, &dm).unwrap());
                let scale = a.tau2 + 1.0;
                prop_assert!(
                    close(a.tau2, b.tau2, 1e-6 * scale),
                    "{m:?} tau2 {} vs {}",
                    a.tau2,
                    b.tau2
                );
                prop_assert!(close(a.b[0] + c, b.b[0], 1e-6 * scale), "{m:?} intercept");
                if with_mod {
                    prop_assert!(close(a.b[1], b.b[1], 1e-6 * scale), "{m:?} slope");
                }
                prop_assert!(close(a.qe, b.qe, 1e-6 * (a.qe + 1.0)));
            }
            Ok(())
        },
    )
}

pub fn scale_equivariance(cases: u32) -> Result<(), String> {
    run(
        cases,
        (study_set(5, 25), 0.2..5.0f64, any::<bool>()),
        |((y, v, x), s, with_mod)| {
            let k = y.len();
            let dm = design(with_mod.then_some(&x[..]), k);
            let ys: Vec<f64> = y.iter().map(|t| t * s).collect();
            let vs: Vec<f64> = v.iter().map(|t| t * s * s).collect();
            let vbar = v.iter().sum::<f64>() / k as f64;
            for m in METHODS {
                let (a, b) = (fit(m, &y, &v, &dm).unwrap(), fit(m, &ys, &vs, &dm).unwrap());
                let tol = 1e-6 * s * s * (a.tau2 + vbar);
                prop_assert!(
                    close(a.tau2 * s * s, b.tau2, tol),
                    "{m:?} tau2 {} vs {}",
                    a.tau2 * s * s,
                    b.tau2
                );
                for j in 0..dm.p() {
                    prop_assert!(
                        close(a.b[j] * s, b.b[j], 1e-5 * s * (a.b[j].abs() + 1.0)),
                        "{m:?} b{j}"
                    );
                }
                prop_assert!(close(a.i2, b.i2, 1e-4 * (a.i2 + 1.0)), "{m:?} I2");
                prop_assert!(close(a.qe, b.qe, 1e-8 * (a.qe + 1.0)), "{m:?} Q");
            }
            Ok(())
        },
    )
}

pub fn gls_residuals_are_orthogonal(cases: u32) -> Result<(), String> {
    run(cases, (study_set(4, 30), 0usize..6), |((y, v, x), m)| {
        let k = y.len();
        let dm = design(Some(&x), k);
        let f = fit(METHODS[m], &y, &v, &dm).unwrap();
        let xtwe = dm.x.transpose() * f.residuals.component_mul(&f.weights);
        let scale =
            (dm.x.transpose() * DMatrix::from_diagonal(&f.weights)).norm() * (f.y.norm() + 1.0);
        prop_assert!(xtwe.norm() <= 1e-9 * scale, "X'We = {xtwe}");
        let refit = &f.y - &dm.x * &f.b;
        prop_assert!((refit - &f.residuals).norm() <= 1e-12 * (f.y.norm() + 1.0));
        Ok(())
    })
}

pub fn prediction_interval_contains_ci(cases: u32) -> Result<(), String> {
    run(
        cases,
        (study_set(4, 25), 0usize..6, any::<bool>(), any::<bool>()),
        |((y, v, x), m, with_mod, z)| {
            let k = y.len();
            let dm = design(with_mod.then_some(&x[..]), k);
            let test = if z {
                TestKind::WaldZ
            } else {
                TestKind::KnappHartung
            };
            let spec = UniModelSpec {
                method: METHODS[m],
                test,
                ..Default::default()
            };
            let f = fit_uni(
                &spec,
                &DVector::from_column_slice(&y),
                &DVector::from_column_slice(&v),
                &dm,
            )
            .unwrap();
            let p = prediction_interval(&f, 0.95);
            prop_assert!(
                p.pi_lb <= p.ci_lb + 1e-12 && p.ci_ub <= p.pi_ub + 1e-12,
                "{p:?}"
            );
            prop_assert!(p.ci_lb <= p.pred && p.pred <= p.ci_ub);
            Ok(())
        },
    )
}

pub fn egger_is_antisymmetric(cases: u32) -> Result<(), String> {
    run(cases, (study_set(5, 25),), |((y, v, _),)| {
        let yv = DVector::from_column_slice(&y);
        let vv = DVector::from_column_slice(&v);
        let neg = -&yv;
        let spec = UniModelSpec::default();
        let a = egger_regression(&yv, &vv, &spec).unwrap();
        let b = egger_regression(&neg, &vv, &spec).unwrap();
        prop_assert!(close(a.slope, -b.slope, 1e-6 * (a.slope.abs() + 1.0)));
        prop_assert!(close(
            a.intercept,
            -b.intercept,
            1e-6 * (a.intercept.abs() + 1.0)
        ));
        prop_assert!(close(a.p, b.p, 1e-6));
        prop_assert!(close(a.tau2, b.tau2, 1e-6 * (a.tau2 + 1.0)));
        Ok(())
    })
}

pub fn rosenthal_grows_with_effect_size(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            3usize..25,
            vec((0.05..1.0f64, 0.01..0.5f64), 25),
            1.0..3.0f64,
        ),
        |(k, seed, s)| {
            let y = DVector::from_iterator(k, seed.iter().take(k).map(|p| p.0));
            let v = DVector::from_iterator(k, seed.iter().take(k).map(|p| p.1));
            let a = failsafe_n(&y, &v, FailSafeMethod::Rosenthal, None, 0.05).unwrap();
            let b = failsafe_n(&(&y * s), &v, FailSafeMethod::Rosenthal, None, 0.05).unwrap();
            prop_assert!(b.real >= a.real - 1e-9, "{} then {}", a.real, b.real);
            prop_assert!(b.n >= a.n);
            Ok(())
        },
    )
}

fn cluster_labels(sizes: &[usize]) -> Vec<String> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &m)| std::iter::repeat(format!("c{g:02}")).take(m))
        .collect()
}

pub fn cr1_is_rescaled_cr0(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            vec(1usize..4, 3..9),
            vec((-2.0..2.0f64, 0.01..1.0f64, -1.0..1.0f64), 40),
            0usize..6,
        ),
        |(sizes, seed, m)| {
            let cl = cluster_labels(&sizes);
            let k = cl.len();
            let y: Vec<f64> = seed.iter().take(k).map(|s| s.0).collect();
            let v: Vec<f64> = seed.iter().take(k).map(|s| s.1).collect();
            let x: Vec<f64> = seed.iter().take(k).map(|s| s.2).collect();
            prop_assume!(k >= 4);
            let f = fit(METHODS[m], &y, &v, &design(Some(&x), k)).unwrap();
            let r0 = cluster_robust(
                &f,
                &cl,
                RobustOptions {
                    kind: RobustKind::CR0,
                    ..Default::default()
                },
            )
            .unwrap();
            let r1 = cluster_robust(
                &f,
                &cl,
                RobustOptions {
                    kind: RobustKind::CR1,
                    ..Default::default()
                },
            )
            .unwrap();
            let g = sizes.len() as f64;
            let want = &r0.cov_robust * (g / (g - 1.0));
            prop_assert!((&r1.cov_robust - &want).norm() <= 1e-10 * (want.norm() + 1e-300));
            Ok(())
        },
    )
}

pub fn balanced_cr2_df_is_g_minus_1(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            3usize..12,
            1usize..4,
            0.01..1.0f64,
            vec(-2.0..2.0f64, 44),
            0usize..6,
        ),
        |(g, m, vc, ys, meth)| {
            let cl = cluster_labels(&vec![m; g]);
            let k = cl.len();
            let f = fit(METHODS[meth], &ys[..k], &vec![vc; k], &design(None, k)).unwrap();
            let rf = cluster_robust(&f, &cl, RobustOptions::default()).unwrap();
            prop_assert!(
                close(rf.df[0], g as f64 - 1.0, 1e-8 * g as f64),
                "df {} for G = {g}",
                rf.df[0]
            );
            Ok(())
        },
    )
}

pub fn vcalc_is_block_diagonal_and_psd(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            vec(1usize..5, 1..8),
            vec((0.01..1.0f64, 0usize..3), 40),
            0.0..1.0f64,
            0.0..1.0f64,
        ),
        |(sizes, seed, rw, frac)| {
            let cl = cluster_labels(&sizes);
            let k = cl.len();
            let mut csv = String::from("c,t,vi\n");
            for i in 0..k {
                csv.push_str(&format!("{},t{},{}\n", cl[i], seed[i].1, seed[i].0));
            }
            let d = Dataset::from_reader(csv.as_bytes(), &HashMap::new()).unwrap();
            let spec = VcalcSpec {
                cluster: "c".into(),
                construct: Some("t".into()),
                construct_type: Some("t".into()),
                rho_within_type: rw,
                rho_between_type: rw * frac,
            };
            let vm = vcalc(&spec, &d, "vi").unwrap().v;
            for i in 0..k {
                prop_assert_eq!(vm[(i, i)], seed[i].0);
                for j in 0..k {
                    prop_assert_eq!(vm[(i, j)], vm[(j, i)]);
                    if cl[i] != cl[j] {
                        prop_assert_eq!(vm[(i, j)], 0.0);
                    }
                }
            }
            let min = vm.symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-12, "min eigenvalue {min}");
            Ok(())
        },
    )
}

pub fn vcalc_never_returns_an_indefinite_matrix(cases: u32) -> Result<(), String> {
    run(
        cases,
        (
            vec(1usize..6, 1..6),
            vec((0.01..1.0f64, 0usize..3), 40),
            -1.0..1.0f64,
            -1.0..1.0f64,
        ),
        |(sizes, seed, rw, rb)| {
            let cl = cluster_labels(&sizes);
            let k = cl.len();
            let mut csv = String::from("c,t,vi\n");
            for i in 0..k {
                csv.push_str(&format!("{},t{},{}\n", cl[i], seed[i].1, seed[i].0));
            }
            let d = Dataset::from_reader(csv.as_bytes(), &HashMap::new()).unwrap();
            let spec = VcalcSpec {
                cluster: "c".into(),
                construct: Some("t".into()),
                construct_type: Some("t".into()),
                rho_within_type: rw,
                rho_between_type: rb,
            };
            match vcalc(&spec, &d, "vi") {
                Ok(vm) => {
                    let min = vm.v.symmetric_eigenvalues().min();
                    prop_assert!(
                        min >= -1e-10 * vm.v.norm(),
                        "accepted an indefinite V (min eigenvalue {min})"
                    );
                }
                Err(e) => prop_assert!(matches!(e, MetaError::PsdViolation { .. }), "{e}"),
            }
            Ok(())
        },
    )
}

/// k rows with a three-level factor (every level present) and a covariate.
fn factor_data(y: &[f64], v: &[f64], x: &[f64]) -> Dataset {
    let mut csv = String::from("y,v,g,x\n");
    for i in 0..y.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            y[i],
            v[i],
            ["a", "b", "c"][i % 3],
            x[i]
        ));
    }
    Dataset::from_reader(csv.as_bytes(), &HashMap::new()).unwrap()
}

pub fn emm_and_contrasts_agree(cases: u32) -> Result<(), String> {
    run(
        cases,
        (study_set(7, 25), 0usize..6, any::<bool>(), any::<bool>()),
        |((y, v, x), m, unweighted, with_x)| {
            let d = factor_data(&y, &v, &x);
            let mut terms = vec![Term::main("g")];
            if with_x {
                terms.push(Term::main("x"));
            }
            let dm = build_design(&d, &terms, true).unwrap();
            let f = fit(METHODS[m], &y, &v, &dm).unwrap();
            let w = if unweighted {
                Weighting::Unweighted
            } else {
                Weighting::Weighted
            };
            let e = emm(&f, Some("g"), w, 0.0).unwrap();
            let c = contrasts(&f, "g", w, Adjustment::None).unwrap();
            prop_assert_eq!(e.len(), 3);
            prop_assert_eq!(c.len(), 3);
            let pairs = [(0, 1), (0, 2), (1, 2)];
            for (row, (i, j)) in c.iter().zip(pairs) {
                let diff = &e[i].c - &e[j].c;
                let var = (diff.transpose() * &f.vb * &diff)[(0, 0)];
                prop_assert!(close(
                    row.estimate,
                    e[i].estimate - e[j].estimate,
                    1e-10 * (1.0 + row.estimate.abs())
                ));
                prop_assert!(close(row.se, var.sqrt(), 1e-10 * (1.0 + row.se)));
                prop_assert_eq!(&row.comparison, &format!("{} - {}", e[i].level, e[j].level));
            }
            for r in &e {
                prop_assert!(close(
                    r.estimate,
                    r.c.dot(&f.b),
                    1e-12 * (1.0 + r.estimate.abs())
                ));
            }
            // the intercept-only EMM is the average of the level EMMs when unweighted and balanced
            if unweighted && !with_x {
                let all = emm(&f, None, w, 0.0).unwrap();
                let avg = e.iter().map(|r| r.estimate).sum::<f64>() / 3.0;
                prop_assert!(close(all[0].estimate, avg, 1e-10 * (1.0 + avg.abs())));
            }
            Ok(())
        },
    )
}

fn count_class(svg: &str, class: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).expect("well-formed svg");
    doc.descendants()
        .filter(|n| {
            n.attribute("class")
                .is_some_and(|c| c.split_whitespace().any(|x| x == class))
        })
        .count()
}

pub fn svg_is_deterministic_with_one_marker_per_study(cases: u32) -> Result<(), String> {
    run(cases, (study_set(2, 30),), |((y, v, x),)| {
        let k = y.len();
        let f = fit(Method::Reml, &y, &v, &design(None, k)).unwrap();
        let spec = PlotSpec::default();

        let input = FunnelInput {
            y: y.clone(),
            sei: v.iter().map(|t| t.sqrt()).collect(),
            ..Default::default()
        };
        let fo = FunnelOptions {
            estimate: f.b[0],
            tau2: f.tau2,
            ..Default::default()
        };
        let a = funnel_svg(&input, &fo, &spec).unwrap();
        prop_assert_eq!(&a, &funnel_svg(&input, &fo, &spec).unwrap());
        prop_assert_eq!(count_class(&a, "marker"), k);

        let opts = ForestOptions {
            labels: (1..=k).map(|i| format!("Study {i}")).collect(),
            ..Default::default()
        };
        let a = forest_svg(&f, &opts, &spec).unwrap();
        prop_assert_eq!(&a, &forest_svg(&f, &opts, &spec).unwrap());
        prop_assert_eq!(count_class(&a, "study-marker"), k);

        if k >= 3 {
            let d = factor_data(&y, &v, &x);
            let dm = build_design(&d, &[Term::main("x")], true).unwrap();
            let f = fit(Method::Reml, &y, &v, &dm).unwrap();
            let bo = BubbleOptions {
                focal: "x".into(),
                ci_band: true,
                pi_band: true,
                ..Default::default()
            };
            let a = bubble_svg(&f, &bo, &spec).unwrap();
            prop_assert_eq!(&a, &bubble_svg(&f, &bo, &spec).unwrap());
            prop_assert_eq!(count_class(&a, "bubble"), k);
        }
        Ok(())
    })
}

fn mv_dataset(sizes: &[usize], seed: &[(f64, f64, f64)], order: &[usize]) -> Dataset {
    let cl = cluster_labels(sizes);
    let mut csv = String::from("study,es,y,v,x\n");
    for &i in order {
        csv.push_str(&format!(
            "{},e{i:03},{},{},{}\n",
            cl[i], seed[i].0, seed[i].1, seed[i].2
        ));
    }
    Dataset::from_reader(csv.as_bytes(), &HashMap::new()).unwrap()
}

fn mv_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<(f64, f64, f64)>, Vec<usize>)> {
    (
        vec(1usize..4, 4..9),
        vec((-1.5..1.5f64, 0.01..0.3f64, -1.0..1.0f64), 32),
    )
        .prop_flat_map(|(sizes, seed)| {
            let k: usize = sizes.iter().sum();
            let perm = Just((0..k).collect::<Vec<_>>()).prop_shuffle();
            (Just(sizes), Just(seed), perm)
        })
}

pub fn multilevel_fit_ignores_row_order(cases: u32) -> Result<(), String> {
    run(
        cases,
        (mv_strategy(), 0.0..0.8f64, any::<bool>()),
        |((sizes, seed, perm), rho, with_x)| {
            let k: usize = sizes.iter().sum();
            let cols = MvColumns {
                yi: "y".into(),
                vi: "v".into(),
                terms: if with_x {
                    vec![Term::main("x")]
                } else {
                    vec![]
                },
                intercept: true,
                random: NestedRandomSpec {
                    level1: "study".into(),
                    level2: Some("es".into()),
                },
            };
            let src = VSource::Vcalc(VcalcSpec {
                cluster: "study".into(),
                construct: None,
                construct_type: None,
                rho_within_type: rho,
                rho_between_type: 0.0,
            });
            let fits: Vec<_> = [(0..k).collect::<Vec<_>>(), perm]
                .iter()
                .map(|order| {
                    let md = prepare_mv(&mv_dataset(&sizes, &seed, order), &cols, &src).unwrap();
                    fit_mv(
                        &MvModelSpec::default(),
                        &md.y,
                        &md.design,
                        &md.v.v,
                        &md.components,
                    )
                    .unwrap()
                })
                .collect();
            let (a, b) = (&fits[0], &fits[1]);
            prop_assert!(close(
                a.loglik_restricted,
                b.loglik_restricted,
                1e-7 * (1.0 + a.loglik_restricted.abs())
            ));
            for j in 0..a.p {
                prop_assert!(
                    close(a.b[j], b.b[j], 1e-4 * (1.0 + a.b[j].abs())),
                    "b{j}: {} vs {}",
                    a.b[j],
                    b.b[j]
                );
            }
            for c in 0..2 {
                prop_assert!(
                    close(a.sigma2[c], b.sigma2[c], 1e-4 * (a.sigma2[c] + 0.01)),
                    "sigma2[{c}]: {:?} vs {:?}",
                    a.sigma2,
                    b.sigma2
                );
            }
            // GLS orthogonality under the fitted marginal covariance
            let minv = a.m.clone().try_inverse().unwrap();
            let xtme = a.design.x.transpose() * &minv * &a.residuals;
            prop_assert!(
                xtme.norm() <= 1e-8 * (a.design.x.transpose() * &minv).norm() * (a.y.norm() + 1.0)
            );
            Ok(())
        },
    )
}

pub type Check = fn(u32) -> Result<(), String>;

pub const ALL: [(&str, Check); 13] = [
    ("shift_equivariance", shift_equivariance),
    ("scale_equivariance", scale_equivariance),
    ("gls_residuals_are_orthogonal", gls_residuals_are_orthogonal),
    (
        "prediction_interval_contains_ci",
        prediction_interval_contains_ci,
    ),
    ("egger_is_antisymmetric", egger_is_antisymmetric),
    (
        "rosenthal_grows_with_effect_size",
        rosenthal_grows_with_effect_size,
    ),
    ("cr1_is_rescaled_cr0", cr1_is_rescaled_cr0),
    ("balanced_cr2_df_is_g_minus_1", balanced_cr2_df_is_g_minus_1),
    (
        "vcalc_is_block_diagonal_and_psd",
        vcalc_is_block_diagonal_and_psd,
    ),
    (
        "vcalc_never_returns_an_indefinite_matrix",
        vcalc_never_returns_an_indefinite_matrix,
    ),
    ("emm_and_contrasts_agree", emm_and_contrasts_agree),
    (
        "svg_is_deterministic_with_one_marker_per_study",
        svg_is_deterministic_with_one_marker_per_study,
    ),
    (
        "multilevel_fit_ignores_row_order",
        multilevel_fit_ignores_row_order,
    ),
];
