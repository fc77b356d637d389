//! metafor script equivalent to a run config.

use std::fmt::Write;

use metakit::escalc::{EsInput, Measure2x2};
use metakit::ingest::ColumnType;
use metakit::postfit::{Adjustment, Weighting};
use metakit::pubbias::{Estimator, FailSafeMethod, Side};
use metakit::robust::RobustKind;
use metakit::uni::mh::MhMeasure;
use metakit::uni::{Method, TestKind, Transform};

use crate::config::{RunConfig, VcovConfig};

fn q(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// R name for a column, backquoted when it is not syntactic.
fn col(s: &str) -> String {
    let ok = s
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '.')
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_');
    if ok {
        s.to_string()
    } else {
        format!("`{s}`")
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn formula(terms: &[String], intercept: bool) -> String {
    let mut parts: Vec<String> = terms
        .iter()
        .map(|t| {
            t.split([':', '*'])
                .map(|v| col(v.trim()))
                .collect::<Vec<_>>()
                .join(":")
        })
        .collect();
    if parts.is_empty() {
        parts.push("1".into());
    }
    let mut f = format!("~ {}", parts.join(" + "));
    if !intercept {
        f.push_str(" - 1");
    }
    f
}

fn method(m: Method) -> &'static str {
    match m {
        Method::Reml => "REML",
        Method::Ml => "ML",
        Method::Dl => "DL",
        Method::Pm => "PM",
        Method::He => "HE",
        Method::Fe => "EE",
    }
}

fn escalc_call(input: &EsInput) -> String {
    match input {
        EsInput::TwoByTwo { measure, a, b, c, d } => {
            let m = match measure {
                Measure2x2::LogRR => "RR",
                Measure2x2::LogOR => "OR",
                Measure2x2::RD => "RD",
            };
            format!("escalc(measure = \"{m}\", ai = {}, bi = {}, ci = {}, di = {}, data = dat)", col(a), col(b), col(c), col(d))
        }
        EsInput::Smd { m1, m2, sd1, sd2, n1, n2 } => format!(
            "escalc(measure = \"SMD\", m1i = {}, sd1i = {}, n1i = {}, m2i = {}, sd2i = {}, n2i = {}, data = dat)",
            col(m1),
            col(sd1),
            col(n1),
            col(m2),
            col(sd2),
            col(n2)
        ),
        EsInput::FisherZ { r, n } => format!("escalc(measure = \"ZCOR\", ri = {}, ni = {}, data = dat)", col(r), col(n)),
    }
}

fn transf(t: Transform) -> Option<&'static str> {
    match t {
        Transform::None => None,
        Transform::Exp => Some("exp"),
        Transform::Tanh => Some("transf.ztor"),
    }
}

pub fn emit_r_code(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let m = &cfg.model;
    let _ = writeln!(s, "# metakit {} analysis script", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "library(metafor)");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "dat <- read.csv({}, check.names = FALSE)",
        q(&cfg.data.to_string_lossy())
    );
    let mut hinted: Vec<(&String, &ColumnType)> = cfg.column_types.iter().collect();
    hinted.sort_by(|a, b| a.0.cmp(b.0));
    for (name, ty) in hinted {
        match ty {
            ColumnType::Categorical => {
                let c = col(name);
                let _ = writeln!(s, "dat${c} <- factor(dat${c}, levels = sort(unique(dat${c}), method = \"radix\"))");
            }
            ColumnType::Real => {
                let _ = writeln!(s, "dat${0} <- as.numeric(dat${0})", col(name));
            }
            ColumnType::Text => {
                let _ = writeln!(s, "dat${0} <- as.character(dat${0})", col(name));
            }
        }
    }
    if !m.terms.is_empty() || m.scale_terms.is_some() {
        let _ = writeln!(s, "# factor levels follow code-point order, as in metakit");
        let _ = writeln!(s, "for (v in names(dat)) if (is.character(dat[[v]])) dat[[v]] <- factor(dat[[v]], levels = sort(unique(dat[[v]]), method = \"radix\"))");
    }

    // effect sizes
    let (yi, vi) = match &cfg.effect_size.columns {
        Some(c) => {
            let vi = match (&c.vi, &c.sei) {
                (Some(v), _) => col(v),
                (None, Some(se)) => {
                    let _ = writeln!(s, "dat$vi <- dat${}^2", col(se));
                    "vi".to_string()
                }
                _ => "vi".to_string(),
            };
            (col(&c.yi), vi)
        }
        None => {
            for (i, step) in cfg.effect_size.compute.iter().enumerate() {
                let call = escalc_call(&step.input);
                if i == 0 && step.rows_with.is_none() {
                    let _ = writeln!(s, "dat <- {call}");
                    continue;
                }
                if i == 0 {
                    let _ = writeln!(s, "dat$yi <- NA_real_; dat$vi <- NA_real_");
                }
                let _ = writeln!(s, "es <- {call}");
                let mut fill = "is.na(dat$yi)".to_string();
                if let Some(r) = &step.rows_with {
                    let r = col(r);
                    let _ = write!(fill, " & !is.na(dat${r}) & dat${r} != \"\"");
                }
                let _ = writeln!(s, "fill <- {fill}");
                let _ = writeln!(
                    s,
                    "dat$yi[fill] <- es$yi[fill]; dat$vi[fill] <- es$vi[fill]"
                );
            }
            ("yi".to_string(), "vi".to_string())
        }
    };
    let _ = writeln!(s);

    let level = 100.0 * m.ci_level;
    let test = match m.test {
        TestKind::WaldZ => "z",
        TestKind::KnappHartung if m.kh_truncate => "adhoc",
        TestKind::KnappHartung => "knha",
    };
    let mods = formula(&m.terms, m.intercept);
    let fit_name;
    match &m.multilevel {
        None => {
            let mut args = vec![yi.clone(), vi.clone()];
            if !m.terms.is_empty() || !m.intercept {
                args.push(format!("mods = {mods}"));
            }
            if let Some(z) = &m.scale_terms {
                args.push(format!("scale = {}", formula(z, m.scale_intercept)));
            }
            args.push("data = dat".into());
            args.push(format!("method = \"{}\"", method(m.method)));
            args.push(format!("test = \"{test}\""));
            if let Some(t) = m.fixed_tau2 {
                args.push(format!("tau2 = {}", num(t)));
            }
            if level != 95.0 {
                args.push(format!("level = {}", num(level)));
            }
            let _ = writeln!(s, "fit <- rma({})", args.join(", "));
            let _ = writeln!(s, "summary(fit)");
            let _ = writeln!(s, "confint(fit)");
            fit_name = "fit";
        }
        Some(ml) => {
            let mut needed: Vec<String> = vec![yi.clone(), vi.clone(), col(&ml.level1)];
            needed.extend(ml.level2.iter().map(|c| col(c)));
            if let Some(VcovConfig::Vcalc(v)) = &ml.vcov {
                needed.push(col(&v.cluster));
                needed.extend(v.construct_type.iter().map(|c| col(c)));
            }
            for t in &m.terms {
                needed.extend(t.split([':', '*']).map(|v| col(v.trim())));
            }
            let mut seen: Vec<String> = Vec::new();
            needed.retain(|c| {
                if seen.contains(c) {
                    false
                } else {
                    seen.push(c.clone());
                    true
                }
            });
            let list: Vec<String> = needed.iter().map(|c| q(c.trim_matches('`'))).collect();
            let _ = writeln!(
                s,
                "dat <- dat[complete.cases(dat[, c({})]), ]",
                list.join(", ")
            );
            let vname = match &ml.vcov {
                None => vi.clone(),
                Some(VcovConfig::Vcalc(v)) => {
                    let cl = col(&v.cluster);
                    match &v.construct_type {
                        None => {
                            let _ = writeln!(
                                s,
                                "V <- vcalc({vi}, cluster = {cl}, obs = seq_len(nrow(dat)), rho = {}, data = dat)",
                                num(v.rho_within_type)
                            );
                        }
                        Some(ty) => {
                            let ty = col(ty);
                            let _ = writeln!(s, "# within-cluster correlation depends on whether two rows share a construct type");
                            let _ = writeln!(s, "V <- diag(dat${vi}, nrow = nrow(dat))");
                            let _ = writeln!(
                                s,
                                "for (i in seq_len(nrow(dat))) for (j in seq_len(nrow(dat))) {{"
                            );
                            let _ = writeln!(s, "  if (i != j && dat${cl}[i] == dat${cl}[j]) {{");
                            let _ = writeln!(
                                s,
                                "    r <- if (dat${ty}[i] == dat${ty}[j]) {} else {}",
                                num(v.rho_within_type),
                                num(v.rho_between_type)
                            );
                            let _ =
                                writeln!(s, "    V[i, j] <- r * sqrt(dat${vi}[i] * dat${vi}[j])");
                            let _ = writeln!(s, "  }}");
                            let _ = writeln!(s, "}}");
                        }
                    }
                    "V".to_string()
                }
                Some(VcovConfig::Precomputed(p)) => {
                    let _ = writeln!(s, "# NOTE: rows of the precomputed matrix must match the complete cases above");
                    let _ = writeln!(
                        s,
                        "V <- as.matrix(read.csv({}, header = FALSE))",
                        q(&p.to_string_lossy())
                    );
                    "V".to_string()
                }
            };
            let random = match &ml.level2 {
                Some(l2) => format!("~ 1 | {}/{}", col(&ml.level1), col(l2)),
                None => format!("~ 1 | {}", col(&ml.level1)),
            };
            let rtest = match m.test {
                TestKind::WaldZ => "z",
                TestKind::KnappHartung => {
                    let _ = writeln!(s, "# NOTE: metakit scales the multilevel covariance by the weighted residual variance; rma.mv has no equivalent, test = \"t\" keeps the unscaled covariance");
                    "t"
                }
            };
            let mut args = vec![yi.clone(), vname];
            if !m.terms.is_empty() || !m.intercept {
                args.push(format!("mods = {mods}"));
            }
            args.push(format!("random = {random}"));
            args.push("data = dat".into());
            args.push("method = \"REML\"".into());
            args.push(format!("test = \"{rtest}\""));
            if level != 95.0 {
                args.push(format!("level = {}", num(level)));
            }
            let _ = writeln!(s, "fit <- rma.mv({})", args.join(", "));
            let _ = writeln!(s, "summary(fit)");
            if ml.profile_ci {
                let _ = writeln!(s, "confint(fit)");
            }
            if ml.inclusion_tests {
                let n = if ml.level2.is_some() { 2 } else { 1 };
                let _ = writeln!(s, "# component inclusion tests");
                for drop in 0..n {
                    let pins: Vec<&str> =
                        (0..n).map(|j| if j == drop { "0" } else { "NA" }).collect();
                    let _ = writeln!(
                        s,
                        "anova(fit, update(fit, sigma2 = c({})))",
                        pins.join(", ")
                    );
                }
                if n == 2 {
                    let _ = writeln!(s, "anova(fit, update(fit, sigma2 = c(0, 0)))");
                }
            }
            if let Some(p) = &ml.save_v {
                let _ = writeln!(
                    s,
                    "write.table({}, {}, sep = \",\", row.names = FALSE, col.names = FALSE)",
                    if ml.vcov.is_some() {
                        "V"
                    } else {
                        "diag(dat$vi)"
                    },
                    q(&p.to_string_lossy())
                );
            }
            fit_name = "fit";
        }
    }
    if let Some(t) = transf(m.transform) {
        let _ = writeln!(s, "predict({fit_name}, transf = {t})");
    } else {
        let _ = writeln!(s, "predict({fit_name})");
    }
    let mut target = fit_name.to_string();
    if let Some(c) = &cfg.clustering {
        let vcov = match c.kind {
            RobustKind::CR0 => "CR0",
            RobustKind::CR1 => "CR1",
            RobustKind::CR2 => "CR2",
        };
        let _ = writeln!(s);
        let _ = writeln!(s, "# cluster-robust inference");
        let _ = writeln!(
            s,
            "rob <- robust({fit_name}, cluster = dat${}, clubSandwich = TRUE, vcov = \"{vcov}\")",
            col(&c.column)
        );
        let _ = writeln!(s, "rob");
        let _ = writeln!(s, "clubSandwich::coef_test({fit_name}, vcov = \"{vcov}\", cluster = dat${}, test = \"Satterthwaite\")", col(&c.column));
        target = "rob".into();
    }

    if let Some(g) = &cfg.subgroup {
        let g = col(g);
        let _ = writeln!(s);
        let _ = writeln!(s, "# subgroup analysis");
        let _ = writeln!(
            s,
            "sub <- lapply(split(dat, dat${g}), function(d) rma({yi}, {vi}, data = d, method = \"{}\", test = \"{test}\"))",
            method(m.method)
        );
        let _ = writeln!(s, "sub");
        let _ = writeln!(s, "est <- data.frame(b = sapply(sub, function(f) coef(f)[1]), se = sapply(sub, function(f) f$se[1]))");
        let _ = writeln!(
            s,
            "rma(b, sei = se, data = est, method = \"EE\")$QEp  # subgroup differences"
        );
    }

    let o = &cfg.outputs;
    if o.mantel_haenszel.is_some() || o.peto {
        if let Some(EsInput::TwoByTwo { a, b, c, d, .. }) =
            cfg.effect_size.compute.first().map(|x| &x.input)
        {
            let cells = format!(
                "ai = {}, bi = {}, ci = {}, di = {}",
                col(a),
                col(b),
                col(c),
                col(d)
            );
            let _ = writeln!(s);
            if let Some(mh) = o.mantel_haenszel {
                let mm = match mh {
                    MhMeasure::RR => "RR",
                    MhMeasure::OR => "OR",
                    MhMeasure::RD => "RD",
                };
                let _ = writeln!(s, "rma.mh({cells}, measure = \"{mm}\", data = dat)");
            }
            if o.peto {
                let _ = writeln!(s, "rma.peto({cells}, data = dat)");
            }
        } else {
            let _ = writeln!(
                s,
                "# NOTE: Mantel-Haenszel and Peto need 2x2 inputs; not emitted"
            );
        }
    }

    if let Some(e) = &o.emm {
        let _ = writeln!(s);
        let _ = writeln!(s, "# estimated marginal means");
        let w = match e.weighting {
            Weighting::Weighted => "proportional",
            Weighting::Unweighted => "equal",
        };
        let specs: Vec<String> = if e.terms.is_empty() {
            vec!["1".into()]
        } else {
            e.terms.iter().map(|t| q(t)).collect()
        };
        for sp in specs {
            let spec_arg = if sp == "1" {
                "~ 1".to_string()
            } else {
                sp.clone()
            };
            let _ = writeln!(
                s,
                "em <- emmeans::emmeans(emmprep({target}), specs = {spec_arg}, weights = \"{w}\")"
            );
            let _ = writeln!(
                s,
                "summary(em, infer = TRUE, null = {})",
                num(e.test_against)
            );
            if e.contrasts && sp != "1" {
                let adj = match e.adjustment {
                    Adjustment::None => "none",
                    Adjustment::Bonferroni => "bonferroni",
                    Adjustment::Holm => "holm",
                };
                let _ = writeln!(s, "summary(pairs(em, adjust = \"{adj}\"), infer = TRUE)");
            }
        }
        if e.scale {
            let _ = writeln!(s, "# NOTE: scale-model marginal means have no emmeans equivalent; use predict(fit, newscale = ...)");
        }
    }

    if let Some(pb) = &o.pubbias {
        let _ = writeln!(s);
        let _ = writeln!(s, "# publication bias");
        let plain = m.multilevel.is_none()
            && m.terms.is_empty()
            && m.scale_terms.is_none()
            && cfg.subgroup.is_none()
            && m.fixed_tau2.is_none();
        if plain {
            let _ = writeln!(s, "fit0 <- fit");
        } else {
            let _ = writeln!(
                s,
                "fit0 <- rma({yi}, {vi}, data = dat, method = \"{}\", test = \"{test}\")",
                method(m.method)
            );
        }
        if pb.egger {
            let _ = writeln!(s, "regtest(fit0, model = \"rma\", predictor = \"sei\")");
        }
        if pb.begg {
            let _ = writeln!(s, "ranktest(fit0, exact = TRUE)");
        }
        if let Some(tf) = &pb.trim_and_fill {
            let est = match tf.estimator {
                Estimator::L0 => "L0",
                Estimator::R0 => "R0",
            };
            let side = match tf.side {
                Side::Auto => String::new(),
                Side::Left => ", side = \"left\"".into(),
                Side::Right => ", side = \"right\"".into(),
            };
            let _ = writeln!(
                s,
                "trimfill(fit0, estimator = \"{est}\"{side}, maxiter = {})",
                tf.max_iter
            );
        }
        if let Some(f) = &pb.failsafe {
            let ty = match f.method {
                FailSafeMethod::Rosenthal => "Rosenthal",
                FailSafeMethod::Orwin => "Orwin",
                FailSafeMethod::Rosenberg => "Rosenberg",
            };
            let target = f
                .target
                .map(|t| format!(", target = {}", num(t)))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "fsn({yi}, {vi}, data = dat, type = \"{ty}\", alpha = {}{target})",
                num(f.alpha)
            );
        }
    }

    if o.tables
        .as_ref()
        .is_some_and(|t| t.iter().any(|x| x == "diagnostics"))
        && m.multilevel.is_none()
    {
        let _ = writeln!(s);
        let _ = writeln!(s, "influence(fit)");
    }

    let p = &o.plots;
    if p.funnel.is_some() || p.forest.is_some() || p.bubble.is_some() {
        let _ = writeln!(s);
        let _ = writeln!(s, "# plots");
    }
    if let Some(f) = &p.funnel {
        let level: Vec<String> = f.levels.iter().map(|l| num(100.0 * l)).collect();
        let refline = match f.center {
            metakit::plots::FunnelCenter::H0Zero => "0".to_string(),
            metakit::plots::FunnelCenter::H1Estimate => "coef(fit)[1]".to_string(),
        };
        let _ = writeln!(
            s,
            "funnel(fit, level = c({}), refline = {refline})",
            level.join(", ")
        );
    }
    if let Some(f) = &p.forest {
        let mut args = vec!["fit".to_string()];
        if let Some(l) = &f.label {
            args.push(format!("slab = dat${}", col(l)));
        }
        if let Some(t) = transf(m.transform) {
            args.push(format!("atransf = {t}"));
        }
        if f.predicted {
            args.push("addpred = TRUE".into());
        }
        if f.show_weights {
            args.push("showweights = TRUE".into());
        }
        let _ = writeln!(s, "forest({})", args.join(", "));
    }
    if let Some(b) = &p.bubble {
        if m.multilevel.is_none() {
            let _ = writeln!(
                s,
                "regplot(fit, mod = {}, ci = {}, pi = {})",
                q(&b.focal),
                if b.ci { "TRUE" } else { "FALSE" },
                if b.pi { "TRUE" } else { "FALSE" }
            );
        }
    }
    s
}
