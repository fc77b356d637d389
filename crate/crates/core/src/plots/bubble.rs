use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::svg::{label, nice_ticks, x_axis, y_axis, Doc, Scale, PALETTE};
use super::{PlotSpec, JITTER_SEED};
use crate::error::{MetaError, Result};
use crate::kernel::{VarKind, VarValue};
use crate::postfit::{reference_vector_at, Weighting};
use crate::uni::UniFit;

const GRID: usize = 101;
const MAX_R: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BubbleOptions {
    pub focal: String,
    /// Categorical moderator drawn as one trend per level.
    pub separate_lines: Option<String>,
    /// Restrict to rows with this level of a categorical moderator.
    pub panel: Option<(String, String)>,
    pub ci_band: bool,
    pub pi_band: bool,
}

struct Band {
    x: f64,
    pred: f64,
    ci: (f64, f64),
    pi: (f64, f64),
}

fn band_at(fit: &UniFit, fixed: &[(&str, VarValue)]) -> Result<Band> {
    let c = reference_vector_at(&fit.design, fixed, Weighting::Weighted)?;
    let pred = c.dot(&fit.b);
    let var = (c.transpose() * &fit.vb * &c)[(0, 0)].max(0.0);
    let tau2 = match &fit.scale {
        Some(s) => {
            let zfixed: Vec<(&str, VarValue)> = fixed
                .iter()
                .filter(|(n, _)| s.design.encoder.vars.contains_key(*n))
                .cloned()
                .collect();
            let cz = reference_vector_at(&s.design, &zfixed, Weighting::Weighted)?;
            cz.dot(&s.alpha).exp()
        }
        None => fit.tau2,
    };
    let q = fit.reference.critical(fit.spec.ci_level);
    let (se, pse) = (var.sqrt(), (var + tau2).sqrt());
    Ok(Band {
        x: 0.0,
        pred,
        ci: (pred - q * se, pred + q * se),
        pi: (pred - q * pse, pred + q * pse),
    })
}

fn categorical_levels<'a>(fit: &'a UniFit, var: &str) -> Result<&'a [String]> {
    match fit.design.encoder.vars.get(var) {
        Some(VarKind::Categorical { levels }) => Ok(levels),
        Some(VarKind::Continuous) => Err(MetaError::schema(format!("'{var}' is not categorical"))),
        None => Err(MetaError::schema(format!(
            "'{var}' is not a moderator in the model"
        ))),
    }
}

fn level_of(fit: &UniFit, i: usize, var: &str) -> Option<String> {
    match fit.design.rows[i].get(var) {
        Some(VarValue::Level(l)) => Some(l.clone()),
        _ => None,
    }
}

/// Scatter of effect sizes against a moderator with the fitted trend.
pub fn bubble_svg(fit: &UniFit, opts: &BubbleOptions, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let kind = fit
        .design
        .encoder
        .vars
        .get(&opts.focal)
        .ok_or_else(|| {
            MetaError::schema(format!(
                "focal moderator '{}' is not in the model",
                opts.focal
            ))
        })?
        .clone();
    let mut fixed_panel: Vec<(&str, VarValue)> = Vec::new();
    let rows: Vec<usize> = match &opts.panel {
        Some((var, lvl)) => {
            categorical_levels(fit, var)?;
            fixed_panel.push((var.as_str(), VarValue::Level(lvl.clone())));
            (0..fit.k)
                .filter(|&i| level_of(fit, i, var).as_deref() == Some(lvl))
                .collect()
        }
        None => (0..fit.k).collect(),
    };
    if rows.is_empty() {
        return Err(MetaError::Plot("no studies to plot".into()));
    }
    let line_levels: Vec<Option<String>> = match &opts.separate_lines {
        Some(v) => categorical_levels(fit, v)?
            .iter()
            .cloned()
            .map(Some)
            .collect(),
        None => vec![None],
    };
    let wts = fit.weights.clone();
    let wmax = rows.iter().map(|&i| wts[i]).fold(0.0, f64::max);
    let radius = |i: usize| MAX_R * (wts[i] / wmax).sqrt();
    let color_of = |i: usize| -> &str {
        match &opts.separate_lines {
            Some(v) => {
                let l = level_of(fit, i, v).unwrap_or_default();
                let idx = line_levels
                    .iter()
                    .position(|x| x.as_deref() == Some(l.as_str()))
                    .unwrap_or(0);
                PALETTE[idx % PALETTE.len()]
            }
            None => PALETTE[0],
        }
    };

    let (w, h) = (spec.width as f64, spec.height as f64);
    let top = if spec.title.is_empty() { 20.0 } else { 40.0 };
    let legend = opts.separate_lines.is_some();
    let (left, right, bottom) = (70.0, if legend { 130.0 } else { 20.0 }, 55.0);
    let mut doc = Doc::new(spec.width, spec.height);
    if !spec.title.is_empty() {
        doc.text(
            "title",
            w / 2.0,
            24.0,
            "middle",
            &spec.title,
            r#"font-size="14""#,
        );
    }
    let ylab = if spec.y_label.is_empty() {
        "Effect Size"
    } else {
        &spec.y_label
    };
    let xlab = if spec.x_label.is_empty() {
        opts.focal.as_str()
    } else {
        &spec.x_label
    };

    match kind {
        VarKind::Continuous => {
            let xv: Vec<f64> = rows
                .iter()
                .map(|&i| match fit.design.rows[i].get(&opts.focal) {
                    Some(VarValue::Real(x)) => *x,
                    _ => f64::NAN,
                })
                .collect();
            let (xmin, xmax) = xv
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                    (a.min(*x), b.max(*x))
                });
            let mut lines: Vec<(Option<String>, Vec<Band>)> = Vec::new();
            for lvl in &line_levels {
                let mut bands = Vec::with_capacity(GRID);
                for g in 0..GRID {
                    let x = if xmax > xmin {
                        xmin + (xmax - xmin) * g as f64 / (GRID - 1) as f64
                    } else {
                        xmin
                    };
                    let mut fixed = fixed_panel.clone();
                    fixed.push((opts.focal.as_str(), VarValue::Real(x)));
                    if let (Some(v), Some(l)) = (&opts.separate_lines, lvl) {
                        fixed.push((v.as_str(), VarValue::Level(l.clone())));
                    }
                    let mut b = band_at(fit, &fixed)?;
                    b.x = x;
                    bands.push(b);
                }
                lines.push((lvl.clone(), bands));
            }
            let mut ylo = rows.iter().map(|&i| fit.y[i]).fold(f64::INFINITY, f64::min);
            let mut yhi = rows
                .iter()
                .map(|&i| fit.y[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for (_, bands) in &lines {
                for b in bands {
                    let (lo, hi) = if opts.pi_band {
                        b.pi
                    } else if opts.ci_band {
                        b.ci
                    } else {
                        (b.pred, b.pred)
                    };
                    ylo = ylo.min(lo);
                    yhi = yhi.max(hi);
                }
            }
            let xpad = 0.05 * (xmax - xmin).max(1e-9);
            let ypad = 0.05 * (yhi - ylo).max(1e-9);
            let xs = Scale::new(xmin - xpad, xmax + xpad, left, w - right);
            let ys = Scale::new(ylo - ypad, yhi + ypad, h - bottom, top);
            for (li, (_, bands)) in lines.iter().enumerate() {
                let col = PALETTE[li % PALETTE.len()];
                let poly = |f: &dyn Fn(&Band) -> (f64, f64)| -> Vec<(f64, f64)> {
                    let mut pts: Vec<(f64, f64)> = bands
                        .iter()
                        .map(|b| (xs.map(b.x), ys.map(f(b).1)))
                        .collect();
                    pts.extend(bands.iter().rev().map(|b| (xs.map(b.x), ys.map(f(b).0))));
                    pts
                };
                if opts.pi_band {
                    doc.polygon(
                        "pi-band",
                        &poly(&|b| b.pi),
                        &format!(r#"fill="{col}" fill-opacity="0.12" stroke="none""#),
                    );
                }
                if opts.ci_band {
                    doc.polygon(
                        "ci-band",
                        &poly(&|b| b.ci),
                        &format!(r#"fill="{col}" fill-opacity="0.3" stroke="none""#),
                    );
                }
                let pts: Vec<(f64, f64)> = bands
                    .iter()
                    .map(|b| (xs.map(b.x), ys.map(b.pred)))
                    .collect();
                doc.polyline(
                    "trend-line",
                    &pts,
                    &format!(r#"stroke="{col}" stroke-width="2""#),
                );
            }
            doc.open_group("bubbles");
            for (j, &i) in rows.iter().enumerate() {
                let col = color_of(i);
                doc.circle(
                    "bubble",
                    xs.map(xv[j]),
                    ys.map(fit.y[i]),
                    radius(i),
                    &format!(
                        r##"fill="{col}" fill-opacity="0.6" stroke="#000000" stroke-width="0.5""##
                    ),
                );
            }
            doc.close_group();
            let xt: Vec<(f64, String)> = nice_ticks(xs.d0, xs.d1, 6)
                .into_iter()
                .map(|t| (t, label(t, spec.decimals)))
                .collect();
            let yt: Vec<(f64, String)> = nice_ticks(ys.d0, ys.d1, 6)
                .into_iter()
                .map(|t| (t, label(t, spec.decimals)))
                .collect();
            x_axis(&mut doc, &xs, &xt, h - bottom, xlab);
            y_axis(&mut doc, &ys, &yt, left, ylab);
        }
        VarKind::Categorical { levels } => {
            let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED);
            let pos: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    let l = level_of(fit, i, &opts.focal).unwrap_or_default();
                    let idx = levels.iter().position(|x| *x == l).unwrap_or(0) as f64;
                    idx + 1.0 + rng.gen_range(-0.15..0.15)
                })
                .collect();
            let mut est = Vec::new();
            for l in &levels {
                let mut fixed = fixed_panel.clone();
                fixed.push((opts.focal.as_str(), VarValue::Level(l.clone())));
                est.push(band_at(fit, &fixed)?);
            }
            let mut ylo = rows.iter().map(|&i| fit.y[i]).fold(f64::INFINITY, f64::min);
            let mut yhi = rows
                .iter()
                .map(|&i| fit.y[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for b in &est {
                let (lo, hi) = if opts.pi_band { b.pi } else { b.ci };
                ylo = ylo.min(lo);
                yhi = yhi.max(hi);
            }
            let ypad = 0.05 * (yhi - ylo).max(1e-9);
            let xs = Scale::new(0.5, levels.len() as f64 + 0.5, left, w - right);
            let ys = Scale::new(ylo - ypad, yhi + ypad, h - bottom, top);
            doc.open_group("bubbles");
            for (j, &i) in rows.iter().enumerate() {
                doc.circle(
                    "bubble",
                    xs.map(pos[j]),
                    ys.map(fit.y[i]),
                    radius(i),
                    &format!(
                        r##"fill="{}" fill-opacity="0.6" stroke="#000000" stroke-width="0.5""##,
                        color_of(i)
                    ),
                );
            }
            doc.close_group();
            for (li, b) in est.iter().enumerate() {
                let x = xs.map(li as f64 + 1.0);
                if opts.pi_band {
                    doc.line(
                        "pi-band",
                        x,
                        ys.map(b.pi.0),
                        x,
                        ys.map(b.pi.1),
                        r##"stroke="#999999" stroke-width="2""##,
                    );
                }
                if opts.ci_band {
                    doc.line(
                        "ci-band",
                        x,
                        ys.map(b.ci.0),
                        x,
                        ys.map(b.ci.1),
                        r##"stroke="#000000" stroke-width="3""##,
                    );
                }
                doc.circle(
                    "level-estimate",
                    x,
                    ys.map(b.pred),
                    4.5,
                    r##"fill="#000000""##,
                );
            }
            let xt: Vec<(f64, String)> = levels
                .iter()
                .enumerate()
                .map(|(i, l)| (i as f64 + 1.0, l.clone()))
                .collect();
            let yt: Vec<(f64, String)> = nice_ticks(ys.d0, ys.d1, 6)
                .into_iter()
                .map(|t| (t, label(t, spec.decimals)))
                .collect();
            x_axis(&mut doc, &xs, &xt, h - bottom, xlab);
            y_axis(&mut doc, &ys, &yt, left, ylab);
        }
    }
    if let Some(var) = &opts.separate_lines {
        let x0 = w - right + 14.0;
        doc.text("legend-title", x0 - 4.0, top + 4.0, "start", var, "");
        for (j, l) in line_levels.iter().enumerate() {
            let y = top + 22.0 + 18.0 * j as f64;
            doc.open_group("legend-entry");
            doc.circle(
                "legend-key",
                x0,
                y,
                4.0,
                &format!(r#"fill="{}""#, PALETTE[j % PALETTE.len()]),
            );
            doc.text(
                "legend-label",
                x0 + 10.0,
                y + 4.0,
                "start",
                l.as_deref().unwrap_or_default(),
                "",
            );
            doc.close_group();
        }
    }
    Ok(doc.finish())
}

/// One bubble plot per level of `var`.
pub fn bubble_panels(
    fit: &UniFit,
    opts: &BubbleOptions,
    var: &str,
    spec: &PlotSpec,
) -> Result<Vec<(String, String)>> {
    categorical_levels(fit, var)?
        .iter()
        .map(|l| {
            let o = BubbleOptions {
                panel: Some((var.to_string(), l.clone())),
                ..opts.clone()
            };
            Ok((l.clone(), bubble_svg(fit, &o, spec)?))
        })
        .collect()
}
