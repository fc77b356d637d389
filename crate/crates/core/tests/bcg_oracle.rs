//! BCG vaccine trials against values frozen from an independent numpy/scipy
//! oracle (tests/oracles/bcg_oracle.py).

mod common;

use common::*;
use metakit::kernel::{build_design, DesignMatrix, Term};
use metakit::postfit::{baujat, casewise_diagnostics};
use metakit::pubbias::{
    begg_rank, egger_regression, failsafe_n, trim_and_fill, Estimator, FailSafeMethod, Side,
};
use metakit::uni::mh::{fit_mh, fit_peto, MhMeasure};
use metakit::uni::subgroup::subgroup_analysis;
use metakit::uni::{
    ci_tau2_qprofile, estimate_tau2, fit_uni, prediction_interval, Method, TestKind, UniColumns,
    UniModelSpec,
};

const REL: f64 = 1e-4;

#[test]
fn effect_sizes_match() {
    let o = fixture_json("bcg_oracle.json");
    let (y, v) = bcg_yv();
    for i in 0..13 {
        assert_rel("yi", y[i], num(&o["y"][i]), 1e-12);
        assert_rel("vi", v[i], num(&o["v"][i]), 1e-12);
    }
}

#[test]
fn tau2_estimators() {
    let o = fixture_json("bcg_oracle.json");
    let (y, v) = bcg_yv();
    let x = DesignMatrix::intercept_only(13).x;
    for (m, key) in [
        (Method::Reml, "REML"),
        (Method::Ml, "ML"),
        (Method::Dl, "DL"),
        (Method::Pm, "PM"),
        (Method::He, "HE"),
    ] {
        let t = estimate_tau2(m, &y, &v, &x).unwrap().tau2;
        assert_rel(key, t, num(&o["tau2"][key]), REL);
    }
    assert_eq!(estimate_tau2(Method::Fe, &y, &v, &x).unwrap().tau2, 0.0);
}

#[test]
fn reml_knapp_hartung_fit() {
    let o = &fixture_json("bcg_oracle.json")["reml"];
    let (y, v) = bcg_yv();
    let fit = fit_uni(
        &UniModelSpec::default(),
        &y,
        &v,
        &DesignMatrix::intercept_only(13),
    )
    .unwrap();
    let c = &fit.coefs()[0];
    assert_rel("b", c.estimate, num(&o["b"]), REL);
    assert_rel("se_kh", c.se, num(&o["se_kh"]), REL);
    assert_rel("kh_scale", fit.kh_scale, num(&o["kh_scale"]), REL);
    assert_rel("t", c.stat, num(&o["t_kh"]), REL);
    assert_rel("p", c.p, num(&o["p_kh"]), REL);
    assert_rel("ci_lb", c.ci_lb, num(&o["ci_kh"][0]), REL);
    assert_rel("ci_ub", c.ci_ub, num(&o["ci_kh"][1]), REL);
    assert_rel("QE", fit.qe, num(&o["QE"]), 1e-10);
    assert_rel("QEp", fit.qe_p, num(&o["QE_p"]), 1e-6);
    assert_rel("I2", fit.i2, num(&o["I2"]), REL);
    assert_rel("H2", fit.h2, num(&o["H2"]), REL);
    // The oracle omits the constant +½ ln|X'X| (= ½ ln 13 here) that keeps the
    // restricted likelihood invariant to reparameterizations of X.
    let xtx = 0.5 * 13f64.ln();
    assert_abs("loglik", fit.loglik(), num(&o["loglik_reml"]) + xtx, 1e-6);
    assert_abs("ll_ml", fit.loglik_ml, num(&o["loglik_ml_at_reml"]), 1e-6);
    assert_abs("aic", fit.criteria().aic, num(&o["aic"]) - 2.0 * xtx, 1e-6);
    assert_abs("bic", fit.criteria().bic, num(&o["bic"]) - 2.0 * xtx, 1e-6);
    let pi = prediction_interval(&fit, 0.95);
    assert_rel("pi_lb", pi.pi_lb, num(&o["pi_kh"][0]), REL);
    assert_rel("pi_ub", pi.pi_ub, num(&o["pi_kh"][1]), REL);

    let z = fit_uni(
        &UniModelSpec {
            test: TestKind::WaldZ,
            ..Default::default()
        },
        &y,
        &v,
        &DesignMatrix::intercept_only(13),
    )
    .unwrap();
    assert_rel("se_z", z.coefs()[0].se, num(&o["se_z"]), REL);
    assert_rel("ci_z_lb", z.coefs()[0].ci_lb, num(&o["ci_z"][0]), REL);
}

#[test]
fn tau2_qprofile_interval() {
    let o = fixture_json("bcg_oracle.json");
    let (y, v) = bcg_yv();
    let ci = ci_tau2_qprofile(&y, &v, &DesignMatrix::intercept_only(13).x, 0.95).unwrap();
    assert_rel("lb", ci.lb, num(&o["tau2_ci_qprofile"][0]), 1e-6);
    assert_rel("ub", ci.ub, num(&o["tau2_ci_qprofile"][1]), 1e-6);
}

#[test]
fn latitude_meta_regression() {
    let o = &fixture_json("bcg_oracle.json")["ablat_reml_kh"];
    let d = bcg();
    let (y, v) = bcg_yv();
    let dm = build_design(&d, &[Term::main("ablat")], true).unwrap();
    let fit = fit_uni(&UniModelSpec::default(), &y, &v, &dm).unwrap();
    assert_rel("tau2", fit.tau2, num(&o["tau2"]), REL);
    for j in 0..2 {
        assert_rel("b", fit.b[j], num(&o["b"][j]), REL);
        assert_rel("se", fit.vb[(j, j)].sqrt(), num(&o["se"][j]), REL);
    }
}

#[test]
fn egger_begg() {
    let o = fixture_json("bcg_oracle.json");
    let (y, v) = bcg_yv();
    let e = egger_regression(&y, &v, &UniModelSpec::default()).unwrap();
    assert_rel("tau2", e.tau2, num(&o["egger"]["tau2"]), REL);
    assert_rel("slope", e.slope, num(&o["egger"]["slope"]), 1e-6);
    assert_rel("se", e.se, num(&o["egger"]["se"]), 1e-6);
    assert_rel("t", e.stat, num(&o["egger"]["t"]), 1e-6);
    assert_rel("p", e.p, num(&o["egger"]["p"]), 1e-6);
    let b = begg_rank(&y, &v).unwrap();
    assert_eq!(b.s, num(&o["begg"]["S"]));
    assert_rel("tau", b.tau, num(&o["begg"]["tau"]), 1e-12);
    assert_rel("p", b.p, num(&o["begg"]["p"]), 1e-6);
    assert!(!b.exact);
}

#[test]
fn trim_and_fill_both_estimators() {
    let o = &fixture_json("bcg_oracle.json")["trimfill"];
    let (y, v) = bcg_yv();
    for (est, key) in [(Estimator::L0, "L0"), (Estimator::R0, "R0")] {
        let tf = trim_and_fill(&y, &v, est, Side::Auto, 50, &UniModelSpec::default()).unwrap();
        assert_eq!(tf.side, Side::Right);
        assert_eq!(tf.k0 as f64, num(&o[key]["k0"]), "{key}");
        assert_rel(
            "adjusted b",
            tf.adjusted_fit.b[0],
            num(&o[key]["adjusted_b"]),
            REL,
        );
        assert_rel(
            "adjusted tau2",
            tf.adjusted_fit.tau2,
            num(&o[key]["adjusted_tau2"]),
            REL,
        );
        assert_eq!(tf.y.len(), 13 + tf.k0);
    }
}

#[test]
fn failsafe_numbers() {
    let o = &fixture_json("bcg_oracle.json")["failsafe"];
    let (y, v) = bcg_yv();
    let r = failsafe_n(&y, &v, FailSafeMethod::Rosenthal, None, 0.05).unwrap();
    assert_eq!(r.n as f64, num(&o["rosenthal"]));
    assert_rel("rosenthal real", r.real, num(&o["rosenthal_real"]), 1e-10);
    let orwin = failsafe_n(
        &y,
        &v,
        FailSafeMethod::Orwin,
        Some(num(&o["orwin_target"])),
        0.05,
    )
    .unwrap();
    assert_eq!(orwin.n as f64, num(&o["orwin"]));
    let rb = failsafe_n(&y, &v, FailSafeMethod::Rosenberg, None, 0.05).unwrap();
    assert_eq!(rb.n as f64, num(&o["rosenberg"]));
    assert_rel("rosenberg real", rb.real, num(&o["rosenberg_real"]), 1e-10);
}

#[test]
fn mantel_haenszel_and_peto() {
    let o = &fixture_json("bcg_oracle.json")["mh"];
    let t = bcg_tables();
    for (m, key) in [
        (MhMeasure::RR, "rr"),
        (MhMeasure::OR, "or"),
        (MhMeasure::RD, "rd"),
    ] {
        let r = fit_mh(&t, m, 0.95).unwrap();
        assert_rel(key, r.estimate, num(&o[key]), 1e-6);
        assert_rel(key, r.se, num(&o[&format!("{key}_se")]), 1e-6);
    }
    let p = fit_peto(&t, 0.95).unwrap();
    assert_rel("peto", p.estimate, num(&o["peto"]), 1e-6);
    assert_rel("peto se", p.se, num(&o["peto_se"]), 1e-6);
}

#[test]
fn influence_diagnostics() {
    let o = &fixture_json("bcg_oracle.json")["diagnostics"];
    let (y, v) = bcg_yv();
    let fit = fit_uni(
        &UniModelSpec::default(),
        &y,
        &v,
        &DesignMatrix::intercept_only(13),
    )
    .unwrap();
    let diag = casewise_diagnostics(&fit).unwrap();
    let bj = baujat(&fit).unwrap();
    for i in 0..13 {
        assert_abs(
            "rstudent",
            diag[i].rstudent.unwrap(),
            num(&o["rstudent"][i]),
            1e-4,
        );
        assert_rel(
            "cooks",
            diag[i].cooks_d.unwrap(),
            num(&o["cooks_d"][i]),
            1e-3,
        );
        assert_rel("baujat x", bj[i].x, num(&o["baujat_x"][i]), 1e-8);
        assert_rel("baujat y", bj[i].y, num(&o["baujat_y"][i]), 1e-3);
    }
    let hat_sum: f64 = diag.iter().map(|d| d.hat).sum();
    assert!((hat_sum - 1.0).abs() < 1e-8);
    let sum_x: f64 = bj.iter().map(|p| p.x).sum();
    assert!((sum_x - fit.qe).abs() < 1e-8);
    let argmax = (0..13)
        .max_by(|&a, &b| bj[a].x.partial_cmp(&bj[b].x).unwrap())
        .unwrap();
    assert_eq!(argmax as f64, num(&o["baujat_max_x_row"]));
}

#[test]
fn subgroup_by_allocation() {
    let o = &fixture_json("bcg_oracle.json")["subgroup_alloc"];
    let res = subgroup_analysis(
        &UniModelSpec::default(),
        &bcg(),
        &UniColumns::intercept_only("yi", "vi"),
        "alloc",
    )
    .unwrap();
    let levels: Vec<&str> = res.groups.iter().map(|g| g.level.as_str()).collect();
    assert_eq!(levels, ["alternate", "random", "systematic"]);
    for (i, g) in res.groups.iter().enumerate() {
        let f = g.fit.as_ref().unwrap();
        assert_rel("group b", f.b[0], num(&o["estimates"][i]), REL);
        assert_rel("group se", f.vb[(0, 0)].sqrt(), num(&o["se"][i]), REL);
    }
    let bt = res.between.unwrap();
    assert_rel("Q_between", bt.q, num(&o["Q_between"]), REL);
    assert_rel("p", bt.p, num(&o["p"]), REL);
}
