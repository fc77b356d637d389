//! Minimal SVG 1.1 writer with fixed number formatting.

use std::fmt::Write;

/// Qualitative palette for grouped markers.
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub const FONT_SIZE: f64 = 12.0;

/// Coordinate formatting: two decimals, never "-0.00".
pub fn c(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Numeric label with exactly `decimals` decimals.
pub fn label(x: f64, decimals: u32) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NA".into()
        } else if x > 0.0 {
            "Inf".into()
        } else {
            "-Inf".into()
        };
    }
    let s = format!("{x:.*}", decimals as usize);
    // a value that rounds to zero prints without a sign
    if s.starts_with('-') && s[1..].chars().all(|ch| ch == '0' || ch == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Approximate rendered width of `s` in a generic sans-serif face, in px.
pub fn text_width(s: &str, size: f64) -> f64 {
    let em: f64 = s
        .chars()
        .map(|ch| match ch {
            'i' | 'j' | 'l' | '\'' | '|' => 0.28,
            '.' | ',' | ':' | ';' | '!' | ' ' => 0.32,
            'f' | 't' | 'r' | '(' | ')' | '[' | ']' | '-' => 0.4,
            '0'..='9' => 0.64,
            '%' => 0.95,
            'm' | 'w' => 0.9,
            'M' | 'W' => 0.95,
            'A'..='Z' => 0.72,
            'a'..='z' => 0.6,
            _ => 0.6,
        })
        .sum();
    em * size
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Debug, Clone, Copy)]
pub struct Scale {
    pub d0: f64,
    pub d1: f64,
    pub r0: f64,
    pub r1: f64,
}

impl Scale {
    pub fn new(d0: f64, d1: f64, r0: f64, r1: f64) -> Self {
        let (d0, d1) = if d1 > d0 {
            (d0, d1)
        } else {
            (d0 - 0.5, d0 + 0.5)
        };
        Scale { d0, d1, r0, r1 }
    }

    pub fn map(&self, x: f64) -> f64 {
        self.r0 + (x - self.d0) / (self.d1 - self.d0) * (self.r1 - self.r0)
    }
}

/// Round tick positions (1, 2, 5 × 10^k steps) covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end)
        .map(|i| i as f64 * step)
        .map(|t| if t.abs() < step * 1e-9 { 0.0 } else { t })
        .collect()
}

/// Ticks for a ratio scale: 1-2-5 decades within `[lo, hi]` (both > 0).
pub fn ratio_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
    for e in a..=b {
        for m in [1.0, 2.0, 5.0] {
            let t = m * 10f64.powi(e);
            if t >= lo * (1.0 - 1e-12) && t <= hi * (1.0 + 1e-12) {
                out.push(t);
            }
        }
    }
    if out.len() < 2 {
        return nice_ticks(lo, hi, 4);
    }
    out
}

/// Accumulates SVG elements.
pub struct Doc {
    width: f64,
    height: f64,
    body: String,
}

impl Doc {
    pub fn new(width: u32, height: u32) -> Self {
        Doc {
            width: width as f64,
            height: height as f64,
            body: String::new(),
        }
    }

    pub fn raw(&mut self, s: &str) {
        self.body.push_str(s);
        self.body.push('\n');
    }

    pub fn line(&mut self, class: &str, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<line class="{class}" x1="{}" y1="{}" x2="{}" y2="{}" {style}/>"#,
            c(x1),
            c(y1),
            c(x2),
            c(y2)
        );
    }

    pub fn rect(&mut self, class: &str, x: f64, y: f64, w: f64, h: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect class="{class}" x="{}" y="{}" width="{}" height="{}" {style}/>"#,
            c(x),
            c(y),
            c(w),
            c(h)
        );
    }

    pub fn circle(&mut self, class: &str, cx: f64, cy: f64, r: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle class="{class}" cx="{}" cy="{}" r="{}" {style}/>"#,
            c(cx),
            c(cy),
            c(r)
        );
    }

    pub fn polygon(&mut self, class: &str, pts: &[(f64, f64)], style: &str) {
        let p: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{},{}", c(*x), c(*y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polygon class="{class}" points="{}" {style}/>"#,
            p.join(" ")
        );
    }

    pub fn polyline(&mut self, class: &str, pts: &[(f64, f64)], style: &str) {
        let p: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{},{}", c(*x), c(*y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline class="{class}" points="{}" fill="none" {style}/>"#,
            p.join(" ")
        );
    }

    /// `anchor` is start, middle or end.
    pub fn text(&mut self, class: &str, x: f64, y: f64, anchor: &str, s: &str, extra: &str) {
        let _ = writeln!(
            self.body,
            r#"<text class="{class}" x="{}" y="{}" text-anchor="{anchor}" {extra}>{}</text>"#,
            c(x),
            c(y),
            escape(s)
        );
    }

    pub fn open_group(&mut self, class: &str) {
        let _ = writeln!(self.body, r#"<g class="{class}">"#);
    }

    pub fn close_group(&mut self) {
        self.body.push_str("</g>\n");
    }

    pub fn finish(self) -> String {
        let mut s = String::new();
        s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n");
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="{FONT_SIZE}">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(
            s,
            r##"<rect class="background" x="0" y="0" width="{}" height="{}" fill="#ffffff"/>"##,
            self.width, self.height
        );
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        s
    }
}

/// Horizontal axis with ticks and tick labels at `y`.
pub fn x_axis(doc: &mut Doc, sc: &Scale, ticks: &[(f64, String)], y: f64, title: &str) {
    doc.line("axis", sc.r0, y, sc.r1, y, r##"stroke="#000000""##);
    for (t, lab) in ticks {
        let x = sc.map(*t);
        doc.line("tick", x, y, x, y + 5.0, r##"stroke="#000000""##);
        doc.text("tick-label", x, y + 18.0, "middle", lab, "");
    }
    if !title.is_empty() {
        doc.text(
            "axis-title",
            0.5 * (sc.r0 + sc.r1),
            y + 36.0,
            "middle",
            title,
            "",
        );
    }
}

/// Vertical axis at `x`; `sc` maps data onto the vertical pixel range.
pub fn y_axis(doc: &mut Doc, sc: &Scale, ticks: &[(f64, String)], x: f64, title: &str) {
    doc.line("axis", x, sc.r0, x, sc.r1, r##"stroke="#000000""##);
    for (t, lab) in ticks {
        let y = sc.map(*t);
        doc.line("tick", x - 5.0, y, x, y, r##"stroke="#000000""##);
        doc.text("tick-label", x - 8.0, y + 4.0, "end", lab, "");
    }
    if !title.is_empty() {
        let cy = 0.5 * (sc.r0 + sc.r1);
        let tx = x - 48.0;
        doc.text(
            "axis-title",
            tx,
            cy,
            "middle",
            title,
            &format!(r#"transform="rotate(-90 {} {})""#, c(tx), c(cy)),
        );
    }
}
