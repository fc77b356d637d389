use serde::{Deserialize, Serialize};

use super::svg::{label, nice_ticks, text_width, x_axis, y_axis, Doc, Scale, PALETTE};
use super::{level_codes, marker, PlotSpec};
use crate::dist::norm_quantile;
use crate::error::{MetaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FunnelCenter {
    /// Funnel of the null sampling distribution around zero.
    #[default]
    H0Zero,
    /// Centered at the pooled estimate.
    H1Estimate,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FunnelInput {
    pub y: Vec<f64>,
    pub sei: Vec<f64>,
    pub labels: Option<Vec<String>>,
    pub colors: Option<Vec<String>>,
    pub shapes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunnelOptions {
    pub center: FunnelCenter,
    pub estimate: f64,
    pub tau2: f64,
    pub levels: Vec<f64>,
    /// Widen the funnel by τ².
    pub heterogeneity_widened: bool,
}

impl Default for FunnelOptions {
    fn default() -> Self {
        FunnelOptions {
            center: FunnelCenter::H0Zero,
            estimate: 0.0,
            tau2: 0.0,
            levels: vec![0.90, 0.95, 0.99],
            heterogeneity_widened: false,
        }
    }
}

impl FunnelOptions {
    pub fn center_value(&self) -> f64 {
        match self.center {
            FunnelCenter::H0Zero => 0.0,
            FunnelCenter::H1Estimate => self.estimate,
        }
    }
}

/// Funnel boundaries at standard error `sei`.
pub fn funnel_bounds(opts: &FunnelOptions, sei: f64, level: f64) -> (f64, f64) {
    let q = norm_quantile(0.5 + level / 2.0);
    let s = if opts.heterogeneity_widened {
        (sei * sei + opts.tau2).sqrt()
    } else {
        sei
    };
    let m = opts.center_value();
    (m - q * s, m + q * s)
}

const LEVEL_DASH: [&str; 3] = ["2,2", "6,3", ""];

pub fn funnel_svg(data: &FunnelInput, opts: &FunnelOptions, spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let k = data.y.len();
    if k == 0 {
        return Err(MetaError::Plot(
            "funnel plot needs at least one study".into(),
        ));
    }
    if data.sei.len() != k {
        return Err(MetaError::Plot("y and sei differ in length".into()));
    }
    if let Some(i) = data.sei.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(MetaError::Plot(format!(
            "study {} has a nonpositive standard error",
            i + 1
        )));
    }
    if opts.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(MetaError::Plot("funnel levels must lie in (0, 1)".into()));
    }
    let mut levels = opts.levels.clone();
    levels.sort_by(f64::total_cmp);

    let color = data.colors.as_ref().map(|c| level_codes(c));
    let shape = data.shapes.as_ref().map(|s| level_codes(s));
    let legend_w = color.as_ref().map_or(0.0, |(lv, _)| {
        30.0 + lv.iter().map(|l| text_width(l, 12.0)).fold(0.0, f64::max)
    });
    let (w, h) = (spec.width as f64, spec.height as f64);
    let top = if spec.title.is_empty() { 20.0 } else { 40.0 };
    let (left, right, bottom) = (70.0, 20.0 + legend_w, 55.0);

    let se_max = data.sei.iter().cloned().fold(0.0, f64::max) * 1.05;
    let widest = levels.last().copied().unwrap_or(0.95);
    let (flo, fhi) = funnel_bounds(opts, se_max, widest);
    let ymin = data.y.iter().cloned().fold(flo, f64::min);
    let ymax = data.y.iter().cloned().fold(fhi, f64::max);
    let pad = 0.04 * (ymax - ymin).max(1e-9);
    let xs = Scale::new(ymin - pad, ymax + pad, left, w - right);
    let ys = Scale::new(0.0, se_max, top, h - bottom);

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
    // funnel region and boundary lines, widest level first
    for (li, &lv) in levels.iter().enumerate().rev() {
        let n = if opts.heterogeneity_widened && opts.tau2 > 0.0 {
            40
        } else {
            1
        };
        let pts: Vec<f64> = (0..=n).map(|i| se_max * i as f64 / n as f64).collect();
        let lo: Vec<(f64, f64)> = pts
            .iter()
            .map(|&s| (xs.map(funnel_bounds(opts, s, lv).0), ys.map(s)))
            .collect();
        let hi: Vec<(f64, f64)> = pts
            .iter()
            .map(|&s| (xs.map(funnel_bounds(opts, s, lv).1), ys.map(s)))
            .collect();
        let dash = LEVEL_DASH[li.min(2)];
        let style = if dash.is_empty() {
            r##"stroke="#555555""##.to_string()
        } else {
            format!(r##"stroke="#555555" stroke-dasharray="{dash}""##)
        };
        doc.open_group(&format!("funnel-level level-{}", label(lv * 100.0, 0)));
        doc.polyline("funnel-line", &lo, &style);
        doc.polyline("funnel-line", &hi, &style);
        doc.close_group();
    }
    let m = xs.map(opts.center_value());
    doc.line(
        "funnel-center",
        m,
        ys.map(0.0),
        m,
        ys.map(se_max),
        r##"stroke="#555555""##,
    );

    let xt: Vec<(f64, String)> = nice_ticks(xs.d0, xs.d1, 6)
        .into_iter()
        .map(|t| (t, label(t, spec.decimals)))
        .collect();
    let yt: Vec<(f64, String)> = nice_ticks(0.0, se_max, 5)
        .into_iter()
        .map(|t| (t, label(t, spec.decimals)))
        .collect();
    let xlab = if spec.x_label.is_empty() {
        "Effect Size"
    } else {
        &spec.x_label
    };
    let ylab = if spec.y_label.is_empty() {
        "Standard Error"
    } else {
        &spec.y_label
    };
    x_axis(&mut doc, &xs, &xt, h - bottom, xlab);
    y_axis(&mut doc, &ys, &yt, left, ylab);

    doc.open_group("markers");
    for i in 0..k {
        let col = color
            .as_ref()
            .map_or(PALETTE[0], |(_, codes)| PALETTE[codes[i] % PALETTE.len()]);
        let sh = shape.as_ref().map_or(0, |(_, codes)| codes[i]);
        let style = format!(r##"fill="{col}" stroke="#000000" stroke-width="0.5""##);
        marker(
            &mut doc,
            "marker",
            sh,
            xs.map(data.y[i]),
            ys.map(data.sei[i]),
            4.0,
            &style,
        );
    }
    doc.close_group();
    if let Some(labels) = &data.labels {
        for i in 0..k {
            doc.text(
                "marker-label",
                xs.map(data.y[i]) + 6.0,
                ys.map(data.sei[i]) - 4.0,
                "start",
                &labels[i],
                r#"font-size="10""#,
            );
        }
    }
    if let Some((lv, _)) = &color {
        let x0 = w - right + 14.0;
        for (j, l) in lv.iter().enumerate() {
            let y = top + 10.0 + 18.0 * j as f64;
            doc.open_group("legend-entry");
            doc.circle(
                "legend-key",
                x0,
                y,
                4.0,
                &format!(
                    r##"fill="{}" stroke="#000000" stroke-width="0.5""##,
                    PALETTE[j % PALETTE.len()]
                ),
            );
            doc.text("legend-label", x0 + 10.0, y + 4.0, "start", l, "");
            doc.close_group();
        }
    }
    Ok(doc.finish())
}
