//! The analysis pipeline behind each command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use metakit::escalc::{compute_dataset, EsInput, EsReport, TwoByTwo};
use metakit::ingest::Dataset;
use metakit::kernel::Term;
use metakit::mv::{
    ci_sigma_profiles, fit_mv, inclusion_tests, load_precomputed_v, prepare_mv, save_v, MvColumns,
    MvData, MvFit, MvModelSpec, NestedRandomSpec, VSource,
};
use metakit::plots::{
    bubble_panels, bubble_svg, forest_svg, funnel_svg, BubbleOptions, ForestOptions, FunnelInput,
    FunnelOptions, ModelInfo, PlotSpec,
};
use metakit::postfit::{casewise_diagnostics, emm, LinearFit};
use metakit::pubbias::{begg_rank, egger_regression, failsafe_n, trim_and_fill};
use metakit::robust::{cluster_robust, RobustFit, RobustOptions};
use metakit::table::ResultTable;
use metakit::uni::mh::{fit_mh, fit_peto, MhMeasure};
use metakit::uni::subgroup::{subgroup_analysis, SubgroupResult};
use metakit::uni::{fit_dataset, UniColumns, UniData, UniFit, UniModelSpec};
use metakit::MetaError;

use crate::bundle::Bundle;
use crate::config::{LoadedConfig, RunConfig, VcovConfig};
use crate::exit::CliError;
use crate::tables::{self, MvTables, PubbiasResults, UniTables};

/// Worker threads: METAKIT_THREADS when set, else the machine's parallelism.
pub fn threads() -> usize {
    std::env::var("METAKIT_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn load_data(lc: &LoadedConfig) -> Result<Dataset, CliError> {
    let path = lc.resolve(&lc.config.data);
    let d = Dataset::load_csv(&path, &lc.config.column_types).map_err(|e| match e {
        MetaError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Meta(other),
    })?;
    let produced = ["yi", "vi", "sei"];
    for col in lc.config.referenced_columns() {
        let made = !lc.config.effect_size.compute.is_empty() && produced.contains(&col.as_str());
        if !made && !d.has_column(&col) {
            return Err(CliError::Config(format!(
                "column '{col}' is not in the data"
            )));
        }
    }
    Ok(d)
}

/// Effect sizes ready for modelling, with the names of the yi and vi columns.
pub struct EsData {
    pub data: Dataset,
    pub yi: String,
    pub vi: String,
    pub reports: Vec<(String, EsReport)>,
}

fn step_name(input: &EsInput) -> String {
    match input {
        EsInput::TwoByTwo { measure, .. } => format!("2x2 {measure:?}"),
        EsInput::Smd { .. } => "standardized mean difference".into(),
        EsInput::FisherZ { .. } => "Fisher z".into(),
    }
}

pub fn effect_sizes(cfg: &RunConfig, d: &Dataset) -> Result<EsData, CliError> {
    let es = &cfg.effect_size;
    if let Some(c) = &es.columns {
        let (data, vi) = match (&c.vi, &c.sei) {
            (Some(vi), _) => (d.clone(), vi.clone()),
            (None, Some(sei)) => {
                let v: Vec<Option<f64>> = d.real(sei)?.iter().map(|s| s.map(|x| x * x)).collect();
                let name = if d.has_column("vi") {
                    "vi_from_sei".to_string()
                } else {
                    "vi".to_string()
                };
                (d.set_real_column(&name, v)?, name)
            }
            (None, None) => unreachable!("validated"),
        };
        return Ok(EsData {
            data,
            yi: c.yi.clone(),
            vi,
            reports: Vec::new(),
        });
    }
    let mut data = d.clone();
    let mut reports = Vec::new();
    for step in &es.compute {
        let have = data.real("yi").ok().map(|v| v.to_vec());
        let filter = match &step.rows_with {
            Some(col) => Some(d.labels(col)?),
            None => None,
        };
        let positions: Vec<usize> = (0..data.nrows())
            .filter(|&i| have.as_ref().map_or(true, |y| y[i].is_none()))
            .filter(|&i| {
                filter
                    .as_ref()
                    .map_or(true, |f| f[i].as_deref().is_some_and(|s| !s.is_empty()))
            })
            .collect();
        let (next, report) = compute_dataset(&data, &step.input, Some(&positions))?;
        data = next;
        reports.push((step_name(&step.input), report));
    }
    let yi = data.real("yi")?;
    let missing = yi.iter().filter(|v| v.is_none()).count();
    let frac = missing as f64 / data.nrows().max(1) as f64;
    if frac > es.failure_threshold {
        return Err(CliError::Threshold(format!(
            "{missing} of {} rows have no effect size, above the failure threshold {}",
            data.nrows(),
            es.failure_threshold
        )));
    }
    Ok(EsData {
        data,
        yi: "yi".into(),
        vi: "vi".into(),
        reports,
    })
}

fn terms(list: &[String]) -> Result<Vec<Term>, CliError> {
    list.iter()
        .map(|s| Term::parse(s).map_err(CliError::from))
        .collect()
}

pub fn uni_spec(cfg: &RunConfig) -> UniModelSpec {
    let m = &cfg.model;
    UniModelSpec {
        method: m.method,
        test: m.test,
        fixed_tau2: m.fixed_tau2,
        ci_level: m.ci_level,
        kh_truncate: m.kh_truncate,
        transform: m.transform,
    }
}

pub fn uni_columns(cfg: &RunConfig, es: &EsData) -> Result<UniColumns, CliError> {
    let m = &cfg.model;
    Ok(UniColumns {
        yi: es.yi.clone(),
        vi: es.vi.clone(),
        terms: terms(&m.terms)?,
        intercept: m.intercept,
        scale_terms: m.scale_terms.as_deref().map(terms).transpose()?,
        scale_intercept: m.scale_intercept,
    })
}

pub enum Fitted {
    Uni { fit: UniFit, data: UniData },
    Mv { fit: MvFit, data: MvData },
}

impl Fitted {
    pub fn kept(&self) -> &Dataset {
        match self {
            Fitted::Uni { data, .. } => &data.data,
            Fitted::Mv { data, .. } => &data.data,
        }
    }

    pub fn n_omitted(&self) -> usize {
        match self {
            Fitted::Uni { data, .. } => data.complete.n_omitted,
            Fitted::Mv { data, .. } => data.complete.n_omitted,
        }
    }

    pub fn linear(&self) -> &dyn LinearFit {
        match self {
            Fitted::Uni { fit, .. } => fit,
            Fitted::Mv { fit, .. } => fit,
        }
    }
}

pub fn fit_model(lc: &LoadedConfig, es: &EsData, out: Option<&Path>) -> Result<Fitted, CliError> {
    let cfg = &lc.config;
    match &cfg.model.multilevel {
        None => {
            let (fit, data) = fit_dataset(&uni_spec(cfg), &es.data, &uni_columns(cfg, es)?)?;
            Ok(Fitted::Uni { fit, data })
        }
        Some(ml) => {
            let cols = MvColumns {
                yi: es.yi.clone(),
                vi: es.vi.clone(),
                terms: terms(&cfg.model.terms)?,
                intercept: cfg.model.intercept,
                random: NestedRandomSpec {
                    level1: ml.level1.clone(),
                    level2: ml.level2.clone(),
                },
            };
            let source = match &ml.vcov {
                None => VSource::Diagonal,
                Some(VcovConfig::Vcalc(s)) => VSource::Vcalc(s.clone()),
                Some(VcovConfig::Precomputed(p)) => {
                    VSource::Precomputed(load_precomputed_v(lc.resolve(p), &es.data)?)
                }
            };
            let data = prepare_mv(&es.data, &cols, &source)?;
            if let (Some(p), Some(dir)) = (&ml.save_v, out) {
                let target = if p.is_absolute() {
                    p.clone()
                } else {
                    dir.join(p)
                };
                save_v(&data.v, target)?;
            }
            let spec = MvModelSpec {
                test: cfg.model.test,
                ci_level: cfg.model.ci_level,
            };
            let fit = fit_mv(&spec, &data.y, &data.design, &data.v.v, &data.components)?;
            Ok(Fitted::Mv { fit, data })
        }
    }
}

pub fn robust(cfg: &RunConfig, fitted: &Fitted) -> Result<Option<RobustFit>, CliError> {
    let Some(c) = &cfg.clustering else {
        return Ok(None);
    };
    let clusters: Vec<String> = fitted
        .kept()
        .labels(&c.column)?
        .into_iter()
        .map(|s| s.unwrap_or_default())
        .collect();
    let opts = RobustOptions {
        kind: c.kind,
        allow_pseudo_inverse: c.allow_pseudo_inverse,
    };
    let rf = match fitted {
        Fitted::Uni { fit, .. } => cluster_robust(fit, &clusters, opts)?,
        Fitted::Mv { fit, .. } => cluster_robust(fit, &clusters, opts)?,
    };
    Ok(Some(rf))
}

/// 2x2 tables of the kept rows when the effect sizes came from one.
fn two_by_two(cfg: &RunConfig, kept: &Dataset) -> Result<Option<Vec<TwoByTwo>>, CliError> {
    let Some(EsInput::TwoByTwo { a, b, c, d, .. }) =
        cfg.effect_size.compute.first().map(|s| &s.input)
    else {
        return Ok(None);
    };
    let col = |n: &str| -> Result<Vec<Option<f64>>, CliError> { Ok(kept.real(n)?.to_vec()) };
    let (a, b, c, d) = (col(a)?, col(b)?, col(c)?, col(d)?);
    Ok(Some(
        (0..kept.nrows())
            .filter_map(|i| Some(TwoByTwo::new(a[i]?, b[i]?, c[i]?, d[i]?)))
            .collect(),
    ))
}

fn labels_of(d: &Dataset, col: &Option<String>) -> Result<Option<Vec<String>>, CliError> {
    match col {
        Some(c) => Ok(Some(
            d.labels(c)?
                .into_iter()
                .map(|s| s.unwrap_or_default())
                .collect(),
        )),
        None => Ok(None),
    }
}

/// Run the whole `fit` pipeline into `bundle`; tables computed before an
/// error stay in the bundle.
pub fn run_fit(
    lc: &LoadedConfig,
    out: &Path,
    bundle: &mut Bundle,
    with_tables: bool,
    with_plots: bool,
) -> Result<(), CliError> {
    let cfg = &lc.config;
    let d = load_data(lc)?;
    let es = effect_sizes(cfg, &d)?;
    bundle.notes.extend(es.reports.iter().map(|(n, r)| {
        format!(
            "{n}: {} of {} effect sizes computed",
            r.computed, r.attempted
        )
    }));
    let fitted = fit_model(lc, &es, Some(out))?;
    if fitted.n_omitted() > 0 {
        bundle.notes.push(format!(
            "{} rows omitted for missing values",
            fitted.n_omitted()
        ));
    }
    let rf = robust(cfg, &fitted)?;
    let outs = &cfg.outputs;
    let mut subgroup: Option<SubgroupResult> = None;
    if let (Some(g), Fitted::Uni { .. }) = (&cfg.subgroup, &fitted) {
        subgroup = Some(subgroup_analysis(
            &uni_spec(cfg),
            &es.data,
            &uni_columns(cfg, &es)?,
            g,
        )?);
    }
    if with_tables {
        match &fitted {
            Fitted::Uni { fit, data } => {
                let mut mh = Vec::new();
                if outs.mantel_haenszel.is_some() || outs.peto {
                    let tabs = two_by_two(cfg, &data.data)?.ok_or_else(|| {
                        CliError::Config(
                            "Mantel-Haenszel and Peto need a 2x2 effect-size computation".into(),
                        )
                    })?;
                    if let Some(m) = outs.mantel_haenszel {
                        let label = match m {
                            MhMeasure::RR => "Mantel-Haenszel (log RR)",
                            MhMeasure::OR => "Mantel-Haenszel (log OR)",
                            MhMeasure::RD => "Mantel-Haenszel (RD)",
                        };
                        mh.push((label.to_string(), fit_mh(&tabs, m, fit.spec.ci_level)?));
                    }
                    if outs.peto {
                        mh.push((
                            "Peto (log OR)".to_string(),
                            fit_peto(&tabs, fit.spec.ci_level)?,
                        ));
                    }
                }
                let ut = UniTables {
                    fit,
                    robust: rf.as_ref(),
                    subgroup: subgroup.as_ref(),
                    mh,
                };
                bundle.add(outs, ut.tests());
                bundle.add(outs, ut.estimates()?);
                bundle.add_opt(outs, ut.terms());
                bundle.add_opt(outs, ut.coefficients());
                if let Some(e) = &outs.emm {
                    let (t, c) = tables::emm_tables(
                        fit,
                        rf.as_ref(),
                        fit.scale.as_ref(),
                        e,
                        fit.spec.transform,
                    )?;
                    bundle.add(outs, t);
                    bundle.add_opt(outs, c);
                }
                if outs.wants("diagnostics") && outs.tables.is_some() {
                    let diag = casewise_diagnostics(fit)?;
                    let labels = labels_of(
                        &data.data,
                        &cfg.outputs
                            .plots
                            .forest
                            .as_ref()
                            .and_then(|f| f.label.clone()),
                    )?;
                    bundle.add(
                        outs,
                        tables::diagnostics(fit, &diag, data.data.row_ids(), labels.as_deref()),
                    );
                }
                if let Some(pb) = &outs.pubbias {
                    bundle.add(outs, pubbias_table(fit, pb));
                }
            }
            Fitted::Mv { fit, .. } => {
                let mt = MvTables {
                    fit,
                    robust: rf.as_ref(),
                };
                bundle.add(outs, mt.tests());
                bundle.add(outs, mt.estimates(cfg.model.transform));
                bundle.add_opt(outs, mt.terms());
                bundle.add_opt(outs, mt.coefficients());
                let ml = cfg.model.multilevel.as_ref().expect("multilevel");
                let intervals = if ml.profile_ci && outs.wants("random_effects_summary") {
                    ci_sigma_profiles(fit, fit.spec.ci_level, threads())
                        .into_iter()
                        .map(Result::ok)
                        .collect()
                } else {
                    Vec::new()
                };
                bundle.add(outs, mt.random_effects(&intervals));
                if ml.inclusion_tests && outs.wants("component_inclusion_tests") {
                    bundle.add(outs, tables::inclusion(&inclusion_tests(fit)));
                }
                if let Some(e) = &outs.emm {
                    let (t, c) =
                        tables::emm_tables(fit, rf.as_ref(), None, e, cfg.model.transform)?;
                    bundle.add(outs, t);
                    bundle.add_opt(outs, c);
                }
            }
        }
    }
    if with_plots {
        plots(cfg, &fitted, subgroup.as_ref(), rf.as_ref(), out, bundle)?;
    }
    Ok(())
}

pub fn pubbias_table(fit: &UniFit, pb: &crate::config::PubbiasConfig) -> ResultTable {
    let (y, v) = (&fit.y, &fit.v);
    let spec = fit.spec.clone();
    let r = PubbiasResults {
        egger: pb.egger.then(|| egger_regression(y, v, &spec)),
        begg: pb.begg.then(|| begg_rank(y, v)),
        trim_fill: pb
            .trim_and_fill
            .as_ref()
            .map(|t| trim_and_fill(y, v, t.estimator, t.side, t.max_iter, &spec)),
        failsafe: pb
            .failsafe
            .as_ref()
            .map(|f| failsafe_n(y, v, f.method, f.target, f.alpha)),
    };
    tables::pubbias(&r, spec.ci_level, spec.transform)
}

/// The `pubbias` command: tables from the intercept-only fit of the configured effect sizes.
pub fn run_pubbias(lc: &LoadedConfig, bundle: &mut Bundle) -> Result<(), CliError> {
    let cfg = &lc.config;
    let d = load_data(lc)?;
    let es = effect_sizes(cfg, &d)?;
    let cols = UniColumns::intercept_only(&es.yi, &es.vi);
    let (fit, _) = fit_dataset(&uni_spec(cfg), &es.data, &cols)?;
    let pb = cfg.outputs.pubbias.clone().unwrap_or_default();
    bundle
        .tables
        .insert("pubbias".into(), pubbias_table(&fit, &pb));
    Ok(())
}

fn write_svg(out: &Path, name: &str, svg: &str, bundle: &mut Bundle) -> Result<(), CliError> {
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let file = dir.join(format!("{name}.svg"));
    std::fs::write(&file, svg).map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
    bundle.plots.insert(
        name.to_string(),
        PathBuf::from("plots").join(format!("{name}.svg")),
    );
    Ok(())
}

fn spec_labels(
    d: &Dataset,
    spec: &PlotSpec,
) -> Result<
    (
        Option<Vec<String>>,
        Option<Vec<String>>,
        Option<Vec<String>>,
    ),
    CliError,
> {
    Ok((
        labels_of(d, &spec.label_var)?,
        labels_of(d, &spec.color_var)?,
        labels_of(d, &spec.shape_var)?,
    ))
}

fn plots(
    cfg: &RunConfig,
    fitted: &Fitted,
    subgroup: Option<&SubgroupResult>,
    rf: Option<&RobustFit>,
    out: &Path,
    bundle: &mut Bundle,
) -> Result<(), CliError> {
    let p = &cfg.outputs.plots;
    let kept = fitted.kept();
    if let Some(f) = &p.funnel {
        let (y, v, estimate, tau2) = match fitted {
            Fitted::Uni { fit, .. } => (&fit.y, fit.v.clone(), fit.b[0], fit.tau2),
            Fitted::Mv { fit, .. } => (&fit.y, fit.v.diagonal(), fit.b[0], fit.total_sigma2()),
        };
        let (labels, colors, shapes) = spec_labels(kept, &f.spec)?;
        let input = FunnelInput {
            y: y.iter().copied().collect(),
            sei: v.iter().map(|x| x.sqrt()).collect(),
            labels,
            colors,
            shapes,
        };
        let opts = FunnelOptions {
            center: f.center,
            estimate,
            tau2,
            levels: f.levels.clone(),
            heterogeneity_widened: f.heterogeneity_widened,
        };
        write_svg(out, "funnel", &funnel_svg(&input, &opts, &f.spec)?, bundle)?;
    }
    let Fitted::Uni { fit, .. } = fitted else {
        if p.forest.is_some() || p.bubble.is_some() {
            bundle
                .notes
                .push("forest and bubble plots are drawn for univariate models only".into());
        }
        return Ok(());
    };
    if let Some(f) = &p.forest {
        let labels = labels_of(kept, &f.label)?.unwrap_or_default();
        let mut columns = Vec::new();
        for c in &f.columns {
            columns.push((
                c.clone(),
                labels_of(kept, &Some(c.clone()))?.unwrap_or_default(),
            ));
        }
        let groups = match (&cfg.subgroup, f.subgroup, subgroup) {
            (Some(g), true, Some(res)) => {
                Some((labels_of(kept, &Some(g.clone()))?.unwrap_or_default(), res))
            }
            _ => None,
        };
        let emm_rows = match (&cfg.outputs.emm, f.emm_rows) {
            (Some(e), true) => {
                let mut rows = Vec::new();
                for term in &e.terms {
                    rows.extend(emm(fit, Some(term), e.weighting, e.test_against)?);
                }
                rows
            }
            _ => Vec::new(),
        };
        let opts = ForestOptions {
            labels,
            columns,
            aggregation: labels_of(kept, &f.aggregation)?,
            predicted: f.predicted,
            subgroup: groups,
            emm_rows,
            model_info: ModelInfo {
                heterogeneity: f.heterogeneity,
                estimate_test: f.estimate_test,
            },
            show_weights: f.show_weights,
            reference_line: f.reference_line,
        };
        if rf.is_some() {
            bundle
                .notes
                .push("forest plot intervals use the model-based covariance".into());
        }
        write_svg(out, "forest", &forest_svg(fit, &opts, &f.spec)?, bundle)?;
    }
    if let Some(b) = &p.bubble {
        let opts = BubbleOptions {
            focal: b.focal.clone(),
            separate_lines: b.separate_lines.clone(),
            panel: None,
            ci_band: b.ci,
            pi_band: b.pi,
        };
        match &b.separate_plots {
            None => write_svg(out, "bubble", &bubble_svg(fit, &opts, &b.spec)?, bundle)?,
            Some(var) => {
                let panels = bubble_panels(fit, &opts, var, &b.spec)?;
                let mut names: BTreeMap<String, usize> = BTreeMap::new();
                for (level, svg) in panels {
                    let slug: String = level
                        .chars()
                        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                        .collect();
                    let n = names.entry(slug.clone()).or_default();
                    *n += 1;
                    let name = if *n > 1 {
                        format!("bubble_{slug}_{n}")
                    } else {
                        format!("bubble_{slug}")
                    };
                    write_svg(out, &name, &svg, bundle)?;
                }
            }
        }
    }
    Ok(())
}
