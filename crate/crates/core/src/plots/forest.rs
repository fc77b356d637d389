use super::svg::{label, nice_ticks, ratio_ticks, text_width, x_axis, Doc, Scale, FONT_SIZE};
use super::PlotSpec;
use crate::dist::norm_quantile;
use crate::error::{MetaError, Result};
use crate::postfit::EmmRow;
use crate::uni::subgroup::SubgroupResult;
use crate::uni::{prediction_interval, Transform, UniFit};

const ROW_H: f64 = 20.0;
const MAX_SIDE: f64 = 14.0;

/// One study (or aggregated group) line.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestStudy {
    pub label: String,
    pub columns: Vec<String>,
    pub y: f64,
    pub v: f64,
    /// Relative model weight (any positive scale).
    pub weight: f64,
}

/// A diamond: pooled estimate, subgroup estimate or marginal mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestSummary {
    pub label: String,
    pub estimate: f64,
    pub ci_lb: f64,
    pub ci_ub: f64,
    pub pi: Option<(f64, f64)>,
}

/// A block of studies followed by its summaries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForestBlock {
    pub heading: Option<String>,
    pub studies: Vec<ForestStudy>,
    pub summaries: Vec<ForestSummary>,
}

/// Everything the renderer needs, already on the analysis (link) scale.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForestData {
    pub column_titles: Vec<String>,
    pub blocks: Vec<ForestBlock>,
    /// Extra summary rows after all blocks (overall diamond, EMMs).
    pub summaries: Vec<ForestSummary>,
    pub model_info: Vec<String>,
    pub transform: Transform,
    pub reference_line: Option<f64>,
    pub show_weights: bool,
    pub ci_level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelInfo {
    pub heterogeneity: bool,
    pub estimate_test: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ForestOptions<'a> {
    pub labels: Vec<String>,
    /// Extra study-information columns: title and one value per row.
    pub columns: Vec<(String, Vec<String>)>,
    /// Pool rows sharing a value by fixed-effect inverse-variance weighting.
    pub aggregation: Option<Vec<String>>,
    pub predicted: bool,
    /// Per-row group labels and the stratified fits.
    pub subgroup: Option<(Vec<String>, &'a SubgroupResult)>,
    pub emm_rows: Vec<EmmRow>,
    pub model_info: ModelInfo,
    pub show_weights: bool,
    pub reference_line: Option<f64>,
}

fn studies_from(fit: &UniFit, opts: &ForestOptions, rows: &[usize]) -> Vec<ForestStudy> {
    let total: f64 = fit.weights.iter().sum();
    match &opts.aggregation {
        None => rows
            .iter()
            .map(|&i| ForestStudy {
                label: opts
                    .labels
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("Study {}", i + 1)),
                columns: opts.columns.iter().map(|(_, v)| v[i].clone()).collect(),
                y: fit.y[i],
                v: fit.v[i],
                weight: fit.weights[i] / total,
            })
            .collect(),
        Some(groups) => {
            let mut order: Vec<&str> = Vec::new();
            for &i in rows {
                if !order.contains(&groups[i].as_str()) {
                    order.push(&groups[i]);
                }
            }
            order
                .into_iter()
                .map(|g| {
                    let members: Vec<usize> =
                        rows.iter().copied().filter(|&i| groups[i] == g).collect();
                    let sw: f64 = members.iter().map(|&i| 1.0 / fit.v[i]).sum();
                    let y = members.iter().map(|&i| fit.y[i] / fit.v[i]).sum::<f64>() / sw;
                    ForestStudy {
                        label: g.to_string(),
                        columns: opts
                            .columns
                            .iter()
                            .map(|(_, v)| v[members[0]].clone())
                            .collect(),
                        y,
                        v: 1.0 / sw,
                        weight: members.iter().map(|&i| fit.weights[i]).sum::<f64>() / total,
                    }
                })
                .collect()
        }
    }
}

fn summary_of(label: &str, fit: &UniFit, predicted: bool) -> ForestSummary {
    let p = prediction_interval(fit, fit.spec.ci_level);
    ForestSummary {
        label: label.to_string(),
        estimate: p.pred,
        ci_lb: p.ci_lb,
        ci_ub: p.ci_ub,
        pi: predicted.then_some((p.pi_lb, p.pi_ub)),
    }
}

/// Assemble the forest data of a univariate fit.
pub fn forest_data(fit: &UniFit, opts: &ForestOptions) -> Result<ForestData> {
    let k = fit.k;
    if opts.labels.len() != k && !opts.labels.is_empty() {
        return Err(MetaError::schema(format!(
            "{} study labels for {k} rows",
            opts.labels.len()
        )));
    }
    if opts.columns.iter().any(|(_, v)| v.len() != k)
        || opts.aggregation.as_ref().is_some_and(|a| a.len() != k)
    {
        return Err(MetaError::schema(
            "forest column lengths differ from the number of studies",
        ));
    }
    let model_label = if fit.spec.method == crate::uni::Method::Fe {
        "FE Model"
    } else {
        "RE Model"
    };
    let mut data = ForestData {
        column_titles: opts.columns.iter().map(|(t, _)| t.clone()).collect(),
        transform: fit.spec.transform,
        reference_line: opts.reference_line.or(Some(0.0)),
        show_weights: opts.show_weights,
        ci_level: fit.spec.ci_level,
        ..Default::default()
    };
    match &opts.subgroup {
        None => data.blocks.push(ForestBlock {
            heading: None,
            studies: studies_from(fit, opts, &(0..k).collect::<Vec<_>>()),
            summaries: vec![],
        }),
        Some((labels, res)) => {
            if labels.len() != k {
                return Err(MetaError::schema(
                    "subgroup labels differ from the number of studies",
                ));
            }
            for g in &res.groups {
                let rows: Vec<usize> = (0..k).filter(|&i| labels[i] == g.level).collect();
                let summaries = g
                    .fit
                    .as_ref()
                    .map(|f| {
                        vec![summary_of(
                            &format!("{model_label} for {}", g.level),
                            f,
                            opts.predicted,
                        )]
                    })
                    .unwrap_or_default();
                data.blocks.push(ForestBlock {
                    heading: Some(g.level.clone()),
                    studies: studies_from(fit, opts, &rows),
                    summaries,
                });
            }
            if let Some(b) = res.between {
                data.model_info.push(format!(
                    "Test of subgroup differences: Q({}) = {}, p = {}",
                    b.df,
                    label(b.q, 2),
                    label(b.p, 3)
                ));
            }
        }
    }
    data.summaries
        .push(summary_of(model_label, fit, opts.predicted));
    for e in &opts.emm_rows {
        data.summaries.push(ForestSummary {
            label: e.level.clone(),
            estimate: e.estimate,
            ci_lb: e.ci_lb,
            ci_ub: e.ci_ub,
            pi: None,
        });
    }
    if opts.model_info.heterogeneity {
        data.model_info.push(format!(
            "Heterogeneity: Q({}) = {}, p = {}; tau^2 = {}; I^2 = {}%",
            fit.qe_df,
            label(fit.qe, 2),
            label(fit.qe_p, 3),
            label(fit.tau2, 3),
            label(fit.i2, 1)
        ));
    }
    if opts.model_info.estimate_test {
        let c = &fit.coefs()[0];
        let stat = match c.df {
            Some(df) => format!("t({}) = {}", label(df, 0), label(c.stat, 2)),
            None => format!("z = {}", label(c.stat, 2)),
        };
        data.model_info.push(format!(
            "Test of the pooled effect: {stat}, p = {}",
            label(c.p, 3)
        ));
    }
    Ok(data)
}

pub fn forest_svg(fit: &UniFit, opts: &ForestOptions, spec: &PlotSpec) -> Result<String> {
    render_forest(&forest_data(fit, opts)?, spec)
}

fn interval_text(t: Transform, est: f64, lb: f64, ub: f64, d: u32) -> String {
    format!(
        "{} [{}, {}]",
        label(t.apply(est), d),
        label(t.apply(lb), d),
        label(t.apply(ub), d)
    )
}

fn inverse(t: Transform, x: f64) -> f64 {
    match t {
        Transform::None => x,
        Transform::Exp => x.ln(),
        Transform::Tanh => x.atanh(),
    }
}

/// Draw prepared forest data.
pub fn render_forest(data: &ForestData, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let nstud: usize = data.blocks.iter().map(|b| b.studies.len()).sum();
    if nstud == 0 {
        return Err(MetaError::Plot(
            "forest plot needs at least one study".into(),
        ));
    }
    let d = spec.decimals;
    let t = data.transform;
    let z = norm_quantile(0.5 + data.ci_level / 2.0);

    // row layout
    enum Row<'a> {
        Heading(&'a str),
        Study(&'a ForestStudy),
        Summary(&'a ForestSummary),
        Gap,
    }
    let mut rows: Vec<Row> = Vec::new();
    for b in &data.blocks {
        if let Some(h) = &b.heading {
            rows.push(Row::Heading(h));
        }
        rows.extend(b.studies.iter().map(Row::Study));
        rows.extend(b.summaries.iter().map(Row::Summary));
        rows.push(Row::Gap);
    }
    rows.extend(data.summaries.iter().map(Row::Summary));

    // text columns and automatic panel widths
    let right_text = |lo: f64, est: f64, hi: f64| interval_text(t, est, lo, hi, d);
    let mut left_w = text_width("Study", FONT_SIZE);
    let mut col_w: Vec<f64> = data
        .column_titles
        .iter()
        .map(|s| text_width(s, FONT_SIZE))
        .collect();
    let mut right_w = text_width("Estimate [CI]", FONT_SIZE);
    let weight_w = if data.show_weights {
        text_width("100.00%", FONT_SIZE) + 12.0
    } else {
        0.0
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in &rows {
        match r {
            Row::Heading(h) => left_w = left_w.max(text_width(h, FONT_SIZE)),
            Row::Study(s) => {
                left_w = left_w.max(text_width(&s.label, FONT_SIZE));
                for (j, c) in s.columns.iter().enumerate() {
                    col_w[j] = col_w[j].max(text_width(c, FONT_SIZE));
                }
                let (a, b) = (s.y - z * s.v.sqrt(), s.y + z * s.v.sqrt());
                right_w = right_w.max(text_width(&right_text(a, s.y, b), FONT_SIZE));
                lo = lo.min(a);
                hi = hi.max(b);
            }
            Row::Summary(s) => {
                left_w = left_w.max(text_width(&s.label, FONT_SIZE));
                right_w = right_w.max(text_width(
                    &right_text(s.ci_lb, s.estimate, s.ci_ub),
                    FONT_SIZE,
                ));
                lo = lo.min(s.ci_lb);
                hi = hi.max(s.ci_ub);
                if let Some((a, b)) = s.pi {
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
            }
            Row::Gap => {}
        }
    }
    if let Some(r) = data.reference_line {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    let pad = 0.03 * (hi - lo).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);

    let w = spec.width as f64;
    let margin = 10.0;
    let left_total = left_w + col_w.iter().map(|c| c + 14.0).sum::<f64>() + 16.0;
    let right_total = right_w + weight_w + 16.0;
    let (l_px, m_px) = match spec.normalized_panels() {
        Some([a, b, _]) => (a * w, b * w),
        None => {
            let mid = (w - 2.0 * margin - left_total - right_total).max(100.0);
            (left_total, mid)
        }
    };
    let top = if spec.title.is_empty() { 10.0 } else { 34.0 };
    let header_y = top + ROW_H * 0.7;
    let first_row = top + ROW_H * 1.5;
    let axis_y = first_row + ROW_H * rows.len() as f64;
    let needed = axis_y + 50.0 + ROW_H * data.model_info.len() as f64;
    let h = (spec.height as f64).max(needed).ceil();
    let mut doc = Doc::new(spec.width, h as u32);
    let x0 = margin + l_px;
    let xs = Scale::new(lo, hi, x0, x0 + m_px);
    let right_x = x0 + m_px + 12.0;

    if !spec.title.is_empty() {
        doc.text(
            "title",
            w / 2.0,
            22.0,
            "middle",
            &spec.title,
            r#"font-size="14""#,
        );
    }
    doc.text(
        "column-header",
        margin,
        header_y,
        "start",
        "Study",
        r#"font-weight="bold""#,
    );
    let mut cx = margin + left_w + 14.0;
    for (j, title) in data.column_titles.iter().enumerate() {
        doc.text(
            "column-header",
            cx,
            header_y,
            "start",
            title,
            r#"font-weight="bold""#,
        );
        cx += col_w[j] + 14.0;
    }
    doc.text(
        "column-header",
        right_x,
        header_y,
        "start",
        "Estimate [CI]",
        r#"font-weight="bold""#,
    );
    if data.show_weights {
        doc.text(
            "column-header",
            right_x + right_w + weight_w,
            header_y,
            "end",
            "Weight",
            r#"font-weight="bold""#,
        );
    }

    let max_w = rows
        .iter()
        .filter_map(|r| {
            if let Row::Study(s) = r {
                Some(s.weight)
            } else {
                None
            }
        })
        .fold(0.0, f64::max);
    for (ri, r) in rows.iter().enumerate() {
        let y = first_row + ROW_H * ri as f64;
        match r {
            Row::Heading(hd) => doc.text(
                "group-heading",
                margin,
                y + 4.0,
                "start",
                hd,
                r#"font-style="italic""#,
            ),
            Row::Study(s) => {
                let (a, b) = (s.y - z * s.v.sqrt(), s.y + z * s.v.sqrt());
                doc.text("study-label", margin, y + 4.0, "start", &s.label, "");
                let mut cx = margin + left_w + 14.0;
                for (j, c) in s.columns.iter().enumerate() {
                    doc.text("study-column", cx, y + 4.0, "start", c, "");
                    cx += col_w[j] + 14.0;
                }
                doc.line(
                    "study-ci",
                    xs.map(a),
                    y,
                    xs.map(b),
                    y,
                    r##"stroke="#000000""##,
                );
                // area proportional to weight
                let side = if max_w > 0.0 {
                    MAX_SIDE * (s.weight / max_w).sqrt()
                } else {
                    MAX_SIDE
                };
                doc.rect(
                    "study-marker",
                    xs.map(s.y) - side / 2.0,
                    y - side / 2.0,
                    side,
                    side,
                    r##"fill="#000000""##,
                );
                doc.text(
                    "study-estimate",
                    right_x,
                    y + 4.0,
                    "start",
                    &right_text(a, s.y, b),
                    "",
                );
                if data.show_weights {
                    doc.text(
                        "study-weight",
                        right_x + right_w + weight_w,
                        y + 4.0,
                        "end",
                        &format!("{}%", label(100.0 * s.weight, 2)),
                        "",
                    );
                }
            }
            Row::Summary(s) => {
                doc.text(
                    "summary-label",
                    margin,
                    y + 4.0,
                    "start",
                    &s.label,
                    r#"font-weight="bold""#,
                );
                if let Some((a, b)) = s.pi {
                    doc.line(
                        "prediction-interval",
                        xs.map(a),
                        y,
                        xs.map(b),
                        y,
                        r##"stroke="#555555" stroke-width="2""##,
                    );
                }
                let dy = ROW_H * 0.3;
                doc.polygon(
                    "pooled-diamond",
                    &[
                        (xs.map(s.ci_lb), y),
                        (xs.map(s.estimate), y - dy),
                        (xs.map(s.ci_ub), y),
                        (xs.map(s.estimate), y + dy),
                    ],
                    r##"fill="#000000""##,
                );
                doc.text(
                    "summary-estimate",
                    right_x,
                    y + 4.0,
                    "start",
                    &right_text(s.ci_lb, s.estimate, s.ci_ub),
                    r#"font-weight="bold""#,
                );
            }
            Row::Gap => {}
        }
    }
    if let Some(r) = data.reference_line {
        let x = xs.map(r);
        doc.line(
            "reference-line",
            x,
            first_row - ROW_H * 0.5,
            x,
            axis_y,
            r##"stroke="#888888" stroke-dasharray="4,3""##,
        );
    }
    let ticks: Vec<(f64, String)> = match t {
        Transform::Exp => ratio_ticks(lo.exp(), hi.exp())
            .into_iter()
            .map(|v| (v.ln(), label(v, d)))
            .collect(),
        Transform::Tanh => nice_ticks(lo.tanh(), hi.tanh(), 6)
            .into_iter()
            .map(|v| (inverse(t, v), label(v, d)))
            .collect(),
        Transform::None => nice_ticks(lo, hi, 6)
            .into_iter()
            .map(|v| (v, label(v, d)))
            .collect(),
    };
    let ticks: Vec<(f64, String)> = ticks
        .into_iter()
        .filter(|(x, _)| *x >= lo && *x <= hi)
        .collect();
    let xlab = if spec.x_label.is_empty() {
        "Effect Size"
    } else {
        &spec.x_label
    };
    x_axis(&mut doc, &xs, &ticks, axis_y, xlab);
    for (i, line) in data.model_info.iter().enumerate() {
        doc.text(
            "model-info",
            margin,
            axis_y + 56.0 + ROW_H * i as f64,
            "start",
            line,
            "",
        );
    }
    Ok(doc.finish())
}
