mod common;

use common::*;
use metakit::kernel::{DesignMatrix, Term};
use metakit::plots::{
    bubble_panels, bubble_svg, forest_svg, funnel_bounds, funnel_svg, BubbleOptions, ForestOptions,
    FunnelCenter, FunnelInput, FunnelOptions, ModelInfo, PlotSpec,
};
use metakit::uni::subgroup::subgroup_analysis;
use metakit::uni::{fit_dataset, fit_uni, Transform, UniColumns, UniFit, UniModelSpec};

fn count_class(svg: &str, class: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).expect("well-formed svg");
    doc.descendants()
        .filter(|n| {
            n.attribute("class")
                .is_some_and(|c| c.split_whitespace().any(|x| x == class))
        })
        .count()
}

fn attr_of(svg: &str, class: &str, attr: &str) -> Vec<f64> {
    let doc = roxmltree::Document::parse(svg).unwrap();
    doc.descendants()
        .filter(|n| n.attribute("class") == Some(class))
        .map(|n| n.attribute(attr).unwrap().parse().unwrap())
        .collect()
}

fn bcg_fit() -> UniFit {
    let (y, v) = bcg_yv();
    fit_uni(
        &UniModelSpec::default(),
        &y,
        &v,
        &DesignMatrix::intercept_only(13),
    )
    .unwrap()
}

fn authors() -> Vec<String> {
    bcg()
        .labels("author")
        .unwrap()
        .into_iter()
        .map(|s| s.unwrap())
        .collect()
}

fn golden(name: &str, svg: &str) {
    let path = fixture_path(&format!("golden/{name}"));
    if std::env::var_os("METAKIT_BLESS").is_some() {
        std::fs::create_dir_all(fixture_path("golden")).unwrap();
        std::fs::write(&path, svg).unwrap();
    }
    let want =
        std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {path}"));
    assert!(want == svg, "{name} differs from its golden file");
}

fn bcg_funnel() -> String {
    let fit = bcg_fit();
    let d = bcg();
    let (y, v) = bcg_yv();
    let input = FunnelInput {
        y: y.iter().copied().collect(),
        sei: v.iter().map(|x| x.sqrt()).collect(),
        colors: Some(
            d.labels("alloc")
                .unwrap()
                .into_iter()
                .map(|s| s.unwrap())
                .collect(),
        ),
        ..Default::default()
    };
    let opts = FunnelOptions {
        center: FunnelCenter::H1Estimate,
        estimate: fit.b[0],
        tau2: fit.tau2,
        ..Default::default()
    };
    funnel_svg(&input, &opts, &PlotSpec::default()).unwrap()
}

fn bcg_forest() -> String {
    let (y, v) = bcg_yv();
    let spec = UniModelSpec {
        transform: Transform::Exp,
        ..Default::default()
    };
    let fit = fit_uni(&spec, &y, &v, &DesignMatrix::intercept_only(13)).unwrap();
    let opts = ForestOptions {
        labels: authors(),
        model_info: ModelInfo {
            heterogeneity: true,
            estimate_test: true,
        },
        show_weights: true,
        predicted: true,
        reference_line: Some(0.0),
        ..Default::default()
    };
    forest_svg(&fit, &opts, &PlotSpec::default()).unwrap()
}

fn ablat_fit() -> UniFit {
    let cols = UniColumns {
        terms: vec![Term::main("ablat")],
        ..UniColumns::intercept_only("yi", "vi")
    };
    fit_dataset(&UniModelSpec::default(), &bcg(), &cols)
        .unwrap()
        .0
}

fn bcg_bubble() -> String {
    let opts = BubbleOptions {
        focal: "ablat".into(),
        ci_band: true,
        pi_band: true,
        ..Default::default()
    };
    bubble_svg(&ablat_fit(), &opts, &PlotSpec::default()).unwrap()
}

fn alloc_bubble() -> String {
    let cols = UniColumns {
        terms: vec![Term::main("alloc")],
        ..UniColumns::intercept_only("yi", "vi")
    };
    let fit = fit_dataset(&UniModelSpec::default(), &bcg(), &cols)
        .unwrap()
        .0;
    let opts = BubbleOptions {
        focal: "alloc".into(),
        ci_band: true,
        pi_band: true,
        ..Default::default()
    };
    bubble_svg(&fit, &opts, &PlotSpec::default()).unwrap()
}

#[test]
fn funnel_markers_and_legend() {
    let svg = bcg_funnel();
    assert_eq!(count_class(&svg, "marker"), 13);
    assert_eq!(count_class(&svg, "legend-entry"), 3);
    assert_eq!(count_class(&svg, "funnel-line"), 6);
    assert_eq!(svg, bcg_funnel());
}

#[test]
fn funnel_bounds_and_widening() {
    let o = FunnelOptions::default();
    let (lo, hi) = funnel_bounds(&o, 0.5, 0.95);
    assert_abs("lower", lo, -1.959963984540054 * 0.5, 1e-12);
    assert_abs("upper", hi, 1.959963984540054 * 0.5, 1e-12);
    let w = FunnelOptions {
        heterogeneity_widened: true,
        tau2: 0.75,
        center: FunnelCenter::H1Estimate,
        estimate: 1.0,
        ..o
    };
    let (lo, hi) = funnel_bounds(&w, 0.5, 0.95);
    assert_abs("widened", hi - lo, 2.0 * 1.959963984540054, 1e-12);
    assert_abs("center", 0.5 * (lo + hi), 1.0, 1e-12);
}

#[test]
fn funnel_rejects_bad_input() {
    let spec = PlotSpec::default();
    let o = FunnelOptions::default();
    assert!(funnel_svg(&FunnelInput::default(), &o, &spec).is_err());
    let bad = FunnelInput {
        y: vec![0.1, 0.2],
        sei: vec![0.1, 0.0],
        ..Default::default()
    };
    assert!(funnel_svg(&bad, &o, &spec).is_err());
    let tiny = PlotSpec {
        width: 50,
        ..Default::default()
    };
    let ok = FunnelInput {
        y: vec![0.1],
        sei: vec![0.1],
        ..Default::default()
    };
    assert!(funnel_svg(&ok, &o, &tiny).is_err());
}

#[test]
fn forest_squares_diamond_and_ratio_axis() {
    let svg = bcg_forest();
    assert_eq!(count_class(&svg, "study-marker"), 13);
    assert_eq!(count_class(&svg, "pooled-diamond"), 1);
    assert_eq!(count_class(&svg, "prediction-interval"), 1);
    assert!(svg.contains("Aronson"));
    // risk-ratio numerals: the pooled RR is about 0.49
    assert!(
        svg.contains("0.49 ["),
        "pooled estimate should print on the ratio scale"
    );
    assert_eq!(svg, bcg_forest());
}

#[test]
fn forest_equal_weights_give_equal_squares() {
    let y = nalgebra::DVector::from_vec(vec![0.1, 0.4, -0.2, 0.3]);
    let v = nalgebra::DVector::from_element(4, 0.05);
    let fit = fit_uni(
        &UniModelSpec::default(),
        &y,
        &v,
        &DesignMatrix::intercept_only(4),
    )
    .unwrap();
    let svg = forest_svg(&fit, &ForestOptions::default(), &PlotSpec::default()).unwrap();
    let w = attr_of(&svg, "study-marker", "width");
    assert_eq!(w.len(), 4);
    assert!(w.iter().all(|x| (x - w[0]).abs() < 1e-9));
}

#[test]
fn forest_square_area_tracks_weight() {
    let fit = bcg_fit();
    let svg = forest_svg(&fit, &ForestOptions::default(), &PlotSpec::default()).unwrap();
    let side = attr_of(&svg, "study-marker", "width");
    let (i, j) = (0, 1);
    let ratio = side[i] * side[i] / (side[j] * side[j]);
    assert_rel("area ratio", ratio, fit.weights[i] / fit.weights[j], 0.05);
}

#[test]
fn forest_subgroups() {
    let d = bcg();
    let res = subgroup_analysis(
        &UniModelSpec::default(),
        &d,
        &UniColumns::intercept_only("yi", "vi"),
        "alloc",
    )
    .unwrap();
    let groups: Vec<String> = d
        .labels("alloc")
        .unwrap()
        .into_iter()
        .map(|s| s.unwrap())
        .collect();
    let fit = bcg_fit();
    let opts = ForestOptions {
        labels: authors(),
        subgroup: Some((groups, &res)),
        ..Default::default()
    };
    let svg = forest_svg(&fit, &opts, &PlotSpec::default()).unwrap();
    assert_eq!(count_class(&svg, "study-marker"), 13);
    assert_eq!(count_class(&svg, "group-heading"), 3);
    assert_eq!(count_class(&svg, "pooled-diamond"), 4);
}

#[test]
fn forest_aggregation_pools_rows() {
    let fit = bcg_fit();
    let alloc: Vec<String> = bcg()
        .labels("alloc")
        .unwrap()
        .into_iter()
        .map(|s| s.unwrap())
        .collect();
    let opts = ForestOptions {
        aggregation: Some(alloc),
        ..Default::default()
    };
    let svg = forest_svg(&fit, &opts, &PlotSpec::default()).unwrap();
    assert_eq!(count_class(&svg, "study-marker"), 3);
}

#[test]
fn bubble_bands_nest() {
    let svg = bcg_bubble();
    assert_eq!(count_class(&svg, "bubble"), 13);
    assert_eq!(count_class(&svg, "trend-line"), 1);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let pts = |class: &str| -> Vec<(f64, f64)> {
        let n = doc
            .descendants()
            .find(|n| n.attribute("class") == Some(class))
            .unwrap();
        n.attribute("points")
            .unwrap()
            .split(' ')
            .map(|p| {
                let (a, b) = p.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect()
    };
    let (ci, pi) = (pts("ci-band"), pts("pi-band"));
    assert_eq!(ci.len(), 202);
    assert_eq!(pi.len(), 202);
    for g in 0..101 {
        // upper edge first, lower edge reversed; pixel y grows downward
        assert!(pi[g].1 <= ci[g].1 + 0.011);
        assert!(pi[201 - g].1 >= ci[201 - g].1 - 0.011);
    }
}

#[test]
fn bubble_flat_trend_for_zero_slope() {
    let mut d = bcg();
    let x: Vec<Option<f64>> = (0..13)
        .map(|i| Some(if i % 2 == 0 { 1.0 } else { 3.0 }))
        .collect();
    d = d.with_real_column("mod", x).unwrap();
    // make yi independent of the moderator: equal means in both arms
    let y: Vec<Option<f64>> = (0..13)
        .map(|i| {
            Some(if i < 12 {
                [0.2, -0.2][(i / 2) % 2]
            } else {
                0.0
            })
        })
        .collect();
    let v: Vec<Option<f64>> = vec![Some(0.04); 13];
    let d = d
        .with_real_column("yy", y)
        .unwrap()
        .with_real_column("vv", v)
        .unwrap();
    let cols = UniColumns {
        terms: vec![Term::main("mod")],
        ..UniColumns::intercept_only("yy", "vv")
    };
    let fit = fit_dataset(&UniModelSpec::default(), &d, &cols).unwrap().0;
    assert!(fit.b[1].abs() < 1e-10);
    let svg = bubble_svg(
        &fit,
        &BubbleOptions {
            focal: "mod".into(),
            ..Default::default()
        },
        &PlotSpec::default(),
    )
    .unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let line = doc
        .descendants()
        .find(|n| n.attribute("class") == Some("trend-line"))
        .unwrap();
    let ys: Vec<&str> = line
        .attribute("points")
        .unwrap()
        .split(' ')
        .map(|p| p.split_once(',').unwrap().1)
        .collect();
    assert!(ys.iter().all(|y| *y == ys[0]));
}

#[test]
fn bubble_categorical_jitter_is_seeded() {
    let a = alloc_bubble();
    assert_eq!(count_class(&a, "bubble"), 13);
    assert_eq!(count_class(&a, "level-estimate"), 3);
    assert_eq!(a, alloc_bubble());
}

#[test]
fn bubble_separate_lines_and_panels() {
    let cols = UniColumns {
        terms: vec![Term::main("ablat"), Term::main("alloc")],
        ..UniColumns::intercept_only("yi", "vi")
    };
    let fit = fit_dataset(&UniModelSpec::default(), &bcg(), &cols)
        .unwrap()
        .0;
    let opts = BubbleOptions {
        focal: "ablat".into(),
        separate_lines: Some("alloc".into()),
        ci_band: true,
        ..Default::default()
    };
    let svg = bubble_svg(&fit, &opts, &PlotSpec::default()).unwrap();
    assert_eq!(count_class(&svg, "trend-line"), 3);
    assert_eq!(count_class(&svg, "legend-entry"), 3);
    let panels = bubble_panels(
        &fit,
        &BubbleOptions {
            focal: "ablat".into(),
            ..Default::default()
        },
        "alloc",
        &PlotSpec::default(),
    )
    .unwrap();
    let n: usize = panels.iter().map(|(_, s)| count_class(s, "bubble")).sum();
    assert_eq!(panels.len(), 3);
    assert_eq!(n, 13);
    assert!(bubble_svg(
        &fit,
        &BubbleOptions {
            focal: "nope".into(),
            ..Default::default()
        },
        &PlotSpec::default()
    )
    .is_err());
}

#[test]
fn golden_files() {
    golden("bcg_funnel.svg", &bcg_funnel());
    golden("bcg_forest.svg", &bcg_forest());
    golden("bcg_bubble.svg", &bcg_bubble());
    golden("bcg_bubble_alloc.svg", &alloc_bubble());
}
