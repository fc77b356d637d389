//! Deterministic SVG funnel, forest and bubble plots.

pub mod bubble;
pub mod forest;
pub mod funnel;
pub mod svg;

use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};

pub use bubble::{bubble_panels, bubble_svg, BubbleOptions};
pub use forest::{forest_svg, ForestOptions, ModelInfo};
pub use funnel::{funnel_bounds, funnel_svg, FunnelCenter, FunnelInput, FunnelOptions};

/// Seed for the jitter of categorical bubble plots ("JASP" in ASCII).
pub const JITTER_SEED: u64 = 0x4A41_5350;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSpec {
    pub width: u32,
    pub height: u32,
    pub decimals: u32,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub color_var: Option<String>,
    pub shape_var: Option<String>,
    pub label_var: Option<String>,
    /// Relative widths of the left, middle and right forest panels; automatic when absent.
    pub panel_widths: Option<[f64; 3]>,
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec {
            width: 640,
            height: 480,
            decimals: 2,
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            color_var: None,
            shape_var: None,
            label_var: None,
            panel_widths: None,
        }
    }
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 100 || self.height < 100 {
            return Err(MetaError::Plot(format!(
                "plot size {}x{} is below 100 px",
                self.width, self.height
            )));
        }
        if let Some(w) = self.panel_widths {
            if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(MetaError::Plot("panel widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Panel widths normalized to sum to one.
    pub fn normalized_panels(&self) -> Option<[f64; 3]> {
        self.panel_widths.map(|w| {
            let s: f64 = w.iter().sum();
            [w[0] / s, w[1] / s, w[2] / s]
        })
    }
}

/// Marker shapes cycled over the levels of a shape variable.
pub(crate) fn marker(
    doc: &mut svg::Doc,
    class: &str,
    shape: usize,
    x: f64,
    y: f64,
    r: f64,
    style: &str,
) {
    match shape % 3 {
        0 => doc.circle(class, x, y, r, style),
        1 => doc.rect(class, x - r, y - r, 2.0 * r, 2.0 * r, style),
        _ => doc.polygon(
            class,
            &[
                (x, y - r * 1.2),
                (x + r * 1.1, y + r * 0.8),
                (x - r * 1.1, y + r * 0.8),
            ],
            style,
        ),
    }
}

/// Sorted distinct values and each row's index into them.
pub(crate) fn level_codes(values: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    let codes = values
        .iter()
        .map(|v| levels.binary_search(v).expect("present"))
        .collect();
    (levels, codes)
}
